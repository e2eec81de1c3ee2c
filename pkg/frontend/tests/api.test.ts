import { afterEach, describe, expect, it, vi } from 'vitest';

import { ApiClient, ROUTE_ALLOWLIST, assertAllowed } from '../src/api.js';

function jsonResponse(body: unknown): Response {
    return new Response(JSON.stringify(body), {
        status: 200,
        headers: { 'Content-Type': 'application/json' },
    });
}

afterEach(() => {
    vi.unstubAllGlobals();
});

describe('route allowlist', () => {
    it('accepts every documented read route', () => {
        assertAllowed('/api/leaderboard/stage1?format=json');
        assertAllowed('/api/leaderboard/stage1?format=json&frozen=part-1');
        assertAllowed('/api/badges/stage1');
        assertAllowed('/api/admin/freeze');
        assertAllowed('/api/admin/verification_status');
        assertAllowed('/ui/config.json');
    });

    it('rejects anything else', () => {
        expect(() => assertAllowed('/api/teams')).toThrow(/allowlist/);
        expect(() => assertAllowed('/api/admin/drop_tables')).toThrow(/allowlist/);
        expect(() => assertAllowed('/internal/debug')).toThrow(/allowlist/);
    });

    it('keeps every client request inside the allowlist', async () => {
        const seen: string[] = [];
        vi.stubGlobal('fetch', (input: RequestInfo | URL) => {
            seen.push(String(input));
            return Promise.resolve(jsonResponse({ entries: [], rows: [], frozen_labels: [] }));
        });

        const api = new ApiClient('');
        await api.leaderboard('stage1', null);
        await api.leaderboard('stage1', 'part-1');
        await api.admin('freeze', 'token', { stage: 'stage1', label: 'x' });
        await api.verificationStatus('token');
        await api.uiConfig();

        expect(seen.length).toBe(5);
        for (const url of seen) {
            const path = url.replace(/^https?:\/\/[^/]+/, '');
            expect(ROUTE_ALLOWLIST.some((p) => p.test(path)), path).toBe(true);
        }
    });

    it('surfaces server error text verbatim', async () => {
        vi.stubGlobal('fetch', () =>
            Promise.resolve(
                new Response(JSON.stringify({ error: 'freeze label already used: part-1' }), {
                    status: 409,
                }),
            ),
        );
        const api = new ApiClient('');
        await expect(api.admin('freeze', 't', {})).rejects.toThrow(
            'freeze label already used: part-1',
        );
    });
});
