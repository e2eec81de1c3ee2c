// DOM rendering. Rows are rendered exactly in payload order; the UI never
// re-sorts what the server ranked.

import type { BoardState } from './board.js';
import type { LeaderboardRow } from './types.js';

export const CHART_ROW_LIMIT = 25;

function el<K extends keyof HTMLElementTagNameMap>(
    tag: K,
    className?: string,
    text?: string,
): HTMLElementTagNameMap[K] {
    const node = document.createElement(tag);
    if (className) node.className = className;
    if (text !== undefined) node.textContent = text;
    return node;
}

export function formatScore(score: number | null): string {
    return score === null ? '—' : score.toFixed(6);
}

export function renderTable(container: HTMLElement, rows: LeaderboardRow[]): void {
    container.innerHTML = '';
    if (rows.length === 0) {
        container.appendChild(el('div', 'empty-state', 'No teams on the board yet.'));
        return;
    }
    const table = el('table', 'board-table');
    const head = el('thead');
    const headRow = el('tr');
    for (const title of ['#', 'Team', 'Score', 'Submissions', 'Last submission', 'Badges', '']) {
        headRow.appendChild(el('th', undefined, title));
    }
    head.appendChild(headRow);
    table.appendChild(head);

    const body = el('tbody');
    for (const row of rows) {
        const tr = el('tr');
        tr.appendChild(el('td', 'rank', String(row.rank)));
        tr.appendChild(el('td', 'team', row.display_name));
        tr.appendChild(el('td', 'score', formatScore(row.best_score)));
        tr.appendChild(el('td', 'count', String(row.submission_count)));
        tr.appendChild(el('td', 'last', row.last_submission_at ?? ''));
        const badges = el('td', 'badges');
        for (const badge of row.badges) {
            const icon = el('span', 'badge-icon', '★');
            icon.title = badge;
            badges.appendChild(icon);
        }
        tr.appendChild(badges);
        tr.appendChild(el('td', 'flag', row.verification_flag));
        body.appendChild(tr);
    }
    table.appendChild(body);
    container.appendChild(table);
}

export function renderBarChart(
    container: HTMLElement,
    rows: LeaderboardRow[],
    showAll: boolean,
): void {
    container.innerHTML = '';
    const scored = rows.filter((row) => row.best_score !== null);
    if (scored.length === 0) {
        container.appendChild(el('div', 'empty-state', 'No scores yet.'));
        return;
    }
    const visible = showAll ? scored : scored.slice(0, CHART_ROW_LIMIT);
    const max = Math.max(...visible.map((row) => row.best_score ?? 0), 1e-12);

    for (const row of visible) {
        const line = el('div', 'chart-row');
        const label = el('span', 'chart-label', row.display_name);
        const track = el('div', 'chart-track');
        const bar = el('div', 'chart-bar');
        const share = Math.max(((row.best_score ?? 0) / max) * 100, 0.5);
        bar.style.width = `${share}%`;
        track.appendChild(bar);
        const value = el('span', 'chart-value',
            `${formatScore(row.best_score)} (${row.submission_count} subs)`);
        line.appendChild(label);
        line.appendChild(track);
        line.appendChild(value);
        container.appendChild(line);
    }
    if (!showAll && scored.length > CHART_ROW_LIMIT) {
        container.appendChild(
            el('div', 'chart-more', `showing top ${CHART_ROW_LIMIT} of ${scored.length}`),
        );
    }
}

export function renderStatusLine(element: HTMLElement, state: BoardState): void {
    const payload = state.payload;
    if (!payload || payload.snapshot_id === null) {
        element.textContent = 'No snapshot published yet.';
        return;
    }
    const what = payload.frozen ? `frozen "${payload.freeze_label}"` : 'live';
    element.textContent =
        `${what} board — as of ${payload.created_at} (snapshot ${payload.snapshot_id}, ` +
        `evaluator v${payload.evaluator_version})`;
}

export function renderBanner(element: HTMLElement, state: BoardState): void {
    if (state.stale) {
        element.textContent = `connection problem: ${state.lastError ?? 'network failure'} — showing last good snapshot`;
        element.classList.add('visible');
    } else {
        element.textContent = '';
        element.classList.remove('visible');
    }
}

export function renderBoard(
    root: {
        table: HTMLElement;
        chart: HTMLElement;
        status: HTMLElement;
        banner: HTMLElement;
    },
    state: BoardState,
    showAll: boolean,
): void {
    renderBanner(root.banner, state);
    renderStatusLine(root.status, state);
    const rows = state.payload?.rows ?? [];
    renderTable(root.table, rows);
    renderBarChart(root.chart, rows, showAll);
}
