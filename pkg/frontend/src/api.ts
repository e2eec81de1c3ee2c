// HTTP client kept deliberately narrow: every request the UI can issue
// goes through these helpers and stays inside the documented route set.

import type { LeaderboardPayload, UiConfig, VerificationStatus } from './types.js';

export const ROUTE_ALLOWLIST: RegExp[] = [
    /^\/api\/leaderboard\/[^/?]+(\?.*)?$/,
    /^\/api\/badges\/[^/?]+$/,
    /^\/api\/admin\/(freeze|twist|badge_grant|reinstate|registration_override|verify_drain|verification_status|audit_log|export)$/,
    /^\/ui\/config\.json$/,
];

export function assertAllowed(path: string): void {
    if (!ROUTE_ALLOWLIST.some((pattern) => pattern.test(path))) {
        throw new Error(`route not in the documented allowlist: ${path}`);
    }
}

export class ApiClient {
    constructor(private baseUrl: string = '') {}

    private async get<T>(path: string): Promise<T> {
        assertAllowed(path);
        const res = await fetch(this.baseUrl + path);
        if (!res.ok) throw new Error(await errorText(res));
        return (await res.json()) as T;
    }

    async leaderboard(stage: string, frozen: string | null): Promise<LeaderboardPayload> {
        const frozenPart = frozen ? `&frozen=${encodeURIComponent(frozen)}` : '';
        return this.get(`/api/leaderboard/${encodeURIComponent(stage)}?format=json${frozenPart}`);
    }

    async uiConfig(): Promise<UiConfig> {
        return this.get('/ui/config.json');
    }

    async admin<T>(action: string, token: string, body: unknown): Promise<T> {
        const path = `/api/admin/${action}`;
        assertAllowed(path);
        const res = await fetch(this.baseUrl + path, {
            method: 'POST',
            headers: {
                'Authorization': `Bearer ${token}`,
                'Content-Type': 'application/json',
            },
            body: JSON.stringify(body ?? {}),
        });
        if (!res.ok) throw new Error(await errorText(res));
        return (await res.json()) as T;
    }

    async verificationStatus(token: string): Promise<VerificationStatus> {
        return this.admin('verification_status', token, {});
    }
}

async function errorText(res: Response): Promise<string> {
    try {
        const body = await res.json();
        if (body && typeof body.error === 'string') return body.error;
        return JSON.stringify(body);
    } catch {
        return `HTTP ${res.status}`;
    }
}
