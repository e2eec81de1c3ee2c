// Organizer panel: freeze, twist (with mandatory confirmation naming the
// auto-freeze), badge grants, reinstatement, and the live verification
// queue. Server errors are shown verbatim; each success surfaces the
// matching audit entry.

import { ApiClient } from './api.js';
import type { BoardState } from './board.js';

export function autoFreezeLabel(stage: string, nextVersion: number): string {
    // mirrors the server's default pre-twist label
    return `${stage}-pre-v${nextVersion}`;
}

export interface AdminElements {
    panel: HTMLElement;
    tokenInput: HTMLInputElement;
    freezeLabel: HTMLInputElement;
    freezeButton: HTMLButtonElement;
    twistButton: HTMLButtonElement;
    badgeTeam: HTMLInputElement;
    badgeId: HTMLInputElement;
    badgeButton: HTMLButtonElement;
    reinstateTeam: HTMLInputElement;
    reinstateButton: HTMLButtonElement;
    result: HTMLElement;
    verification: HTMLElement;
    confirmHost: HTMLElement;
}

interface AuditEntry {
    at: string;
    actor: string;
    action: string;
    result: string;
}

export class AdminPanel {
    private state: BoardState | null = null;

    constructor(
        private api: ApiClient,
        private els: AdminElements,
        private refreshBoard: () => void,
    ) {
        els.freezeButton.addEventListener('click', () => void this.freeze());
        els.twistButton.addEventListener('click', () => this.openTwistConfirmation());
        els.badgeButton.addEventListener('click', () => void this.grantBadge());
        els.reinstateButton.addEventListener('click', () => void this.reinstate());
    }

    get token(): string {
        return this.els.tokenInput.value.trim();
    }

    onBoardUpdate(state: BoardState): void {
        this.state = state;
        const payload = state.payload;
        // twisting only makes sense against the live board, to its successor
        const enabled = Boolean(this.token) && payload !== null && state.frozenLabel === null;
        this.els.twistButton.disabled = !enabled;
        if (payload && state.frozenLabel === null) {
            this.els.twistButton.textContent = `Twist to v${payload.evaluator_version + 1}`;
        }
        if (this.token) void this.refreshVerification();
    }

    openTwistConfirmation(): void {
        const payload = this.state?.payload;
        if (!payload) return;
        const stage = payload.stage_id;
        const next = payload.evaluator_version + 1;
        const label = autoFreezeLabel(stage, next);

        const host = this.els.confirmHost;
        host.innerHTML = '';
        const dialog = document.createElement('div');
        dialog.className = 'confirm-dialog';
        const message = document.createElement('p');
        message.className = 'confirm-message';
        message.textContent =
            `Twist ${stage} to evaluator v${next}? ` +
            `This will freeze live board as "${label}" and re-score every cached submission.`;
        dialog.appendChild(message);

        const confirm = document.createElement('button');
        confirm.className = 'confirm-yes';
        confirm.textContent = 'Confirm twist';
        confirm.addEventListener('click', () => {
            host.innerHTML = '';
            void this.twist(stage, next);
        });
        const cancel = document.createElement('button');
        cancel.className = 'confirm-no';
        cancel.textContent = 'Cancel';
        cancel.addEventListener('click', () => {
            host.innerHTML = '';
        });
        dialog.appendChild(confirm);
        dialog.appendChild(cancel);
        host.appendChild(dialog);
    }

    private async freeze(): Promise<void> {
        const stage = this.state?.stage;
        if (!stage) return;
        await this.run('freeze', { stage, label: this.els.freezeLabel.value.trim() });
    }

    private async twist(stage: string, version: number): Promise<void> {
        await this.run('twist', { stage, version });
    }

    private async grantBadge(): Promise<void> {
        const stage = this.state?.stage;
        if (!stage) return;
        await this.run('badge_grant', {
            stage,
            team: this.els.badgeTeam.value.trim(),
            badge_id: this.els.badgeId.value.trim(),
        });
    }

    private async reinstate(): Promise<void> {
        const stage = this.state?.stage;
        if (!stage) return;
        await this.run('reinstate', { stage, team: this.els.reinstateTeam.value.trim() });
    }

    private async run(action: string, body: unknown): Promise<void> {
        this.els.result.classList.remove('error');
        try {
            await this.api.admin(action, this.token, body);
            const audit = await this.latestAudit(action);
            this.els.result.textContent = audit
                ? `ok — audit: [${audit.at}] ${audit.actor} ${audit.action}: ${audit.result}`
                : 'ok';
        } catch (err) {
            // the server's error text, verbatim
            this.els.result.textContent = err instanceof Error ? err.message : String(err);
            this.els.result.classList.add('error');
            return;
        }
        this.refreshBoard();
    }

    private async latestAudit(action: string): Promise<AuditEntry | null> {
        try {
            const log = await this.api.admin<{ entries: AuditEntry[] }>('audit_log', this.token, {});
            const matching = log.entries.filter((entry) => entry.action === action);
            return matching.length ? matching[matching.length - 1] : null;
        } catch {
            return null;
        }
    }

    private async refreshVerification(): Promise<void> {
        try {
            const status = await this.api.verificationStatus(this.token);
            const lines = [`verification queue: ${status.queued} pending`];
            for (const entry of status.entries.slice(0, 10)) {
                lines.push(
                    `  submission ${entry.submission_id} (v${entry.evaluator_version}), ` +
                    `attempts ${entry.attempts}`,
                );
            }
            for (const alert of status.alerts) lines.push(`ALERT: ${alert}`);
            this.els.verification.textContent = lines.join('\n');
        } catch {
            this.els.verification.textContent = 'verification status unavailable';
        }
    }
}
