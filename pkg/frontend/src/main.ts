// Bootstrap: read the stage list, start polling the selected board, and
// wire the (hidden-by-default) organizer panel.

import { AdminPanel } from './admin.js';
import { ApiClient } from './api.js';
import { BoardPoller } from './board.js';
import { renderBoard } from './render.js';

const DEFAULT_REFRESH_S = 5;

function byId<T extends HTMLElement>(id: string): T {
    const node = document.getElementById(id);
    if (!node) throw new Error(`missing element #${id}`);
    return node as T;
}

async function bootstrap(): Promise<void> {
    const api = new ApiClient();
    const config = await api.uiConfig();
    document.title = config.title;
    byId<HTMLElement>('competition-title').textContent = config.title;

    const discussion = byId<HTMLAnchorElement>('discussion-link');
    if (config.discussion_url) {
        discussion.href = config.discussion_url;
    } else {
        discussion.style.display = 'none';
    }

    const stageSelect = byId<HTMLSelectElement>('stage-select');
    for (const stage of config.stages) {
        const option = document.createElement('option');
        option.value = stage.stage_id;
        option.textContent = stage.stage_id;
        stageSelect.appendChild(option);
    }

    const frozenSelect = byId<HTMLSelectElement>('frozen-select');
    const showAllToggle = byId<HTMLInputElement>('show-all');
    const root = {
        table: byId<HTMLElement>('board-table'),
        chart: byId<HTMLElement>('board-chart'),
        status: byId<HTMLElement>('board-status'),
        banner: byId<HTMLElement>('error-banner'),
    };

    const firstStage = config.stages[0];
    // never poll faster than the stage aggregates
    const refreshS = Math.max(DEFAULT_REFRESH_S, firstStage ? firstStage.aggregation_cadence_s : 1);

    const adminEls = {
        panel: byId<HTMLElement>('admin-panel'),
        tokenInput: byId<HTMLInputElement>('admin-token'),
        freezeLabel: byId<HTMLInputElement>('freeze-label'),
        freezeButton: byId<HTMLButtonElement>('freeze-button'),
        twistButton: byId<HTMLButtonElement>('twist-button'),
        badgeTeam: byId<HTMLInputElement>('badge-team'),
        badgeId: byId<HTMLInputElement>('badge-id'),
        badgeButton: byId<HTMLButtonElement>('badge-button'),
        reinstateTeam: byId<HTMLInputElement>('reinstate-team'),
        reinstateButton: byId<HTMLButtonElement>('reinstate-button'),
        result: byId<HTMLElement>('admin-result'),
        verification: byId<HTMLElement>('verification-status'),
        confirmHost: byId<HTMLElement>('confirm-host'),
    };

    let admin: AdminPanel | null = null;

    const poller = new BoardPoller(api, firstStage ? firstStage.stage_id : 'stage1', refreshS * 1000, (state) => {
        renderBoard(root, state, showAllToggle.checked);
        syncFrozenOptions(frozenSelect, state.payload?.frozen_labels ?? [], state.frozenLabel);
        if (admin) admin.onBoardUpdate(state);
    });

    admin = new AdminPanel(api, adminEls, () => void poller.pollNow());

    stageSelect.addEventListener('change', () => poller.setStage(stageSelect.value));
    frozenSelect.addEventListener('change', () => {
        poller.setFrozenLabel(frozenSelect.value === '' ? null : frozenSelect.value);
    });
    showAllToggle.addEventListener('change', () => void poller.pollNow());

    adminEls.tokenInput.addEventListener('input', () => {
        // panel controls stay hidden until a token is supplied
        adminEls.panel.classList.toggle('unlocked', adminEls.tokenInput.value.trim() !== '');
    });

    poller.start();
}

function syncFrozenOptions(
    select: HTMLSelectElement,
    labels: string[],
    selected: string | null,
): void {
    const current = new Set<string>();
    for (const option of Array.from(select.options)) {
        if (option.value !== '') current.add(option.value);
    }
    if (labels.every((label) => current.has(label)) && current.size === labels.length) {
        return; // unchanged
    }
    select.innerHTML = '';
    const live = document.createElement('option');
    live.value = '';
    live.textContent = 'live';
    select.appendChild(live);
    for (const label of labels) {
        const option = document.createElement('option');
        option.value = label;
        option.textContent = `frozen: ${label}`;
        select.appendChild(option);
    }
    select.value = selected ?? '';
}

void bootstrap();
