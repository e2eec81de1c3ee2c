// Leaderboard polling state machine: stale-while-revalidate, at most one
// in-flight request, last good snapshot retained across failures.

import { ApiClient } from './api.js';
import type { LeaderboardPayload } from './types.js';

export interface BoardState {
    stage: string;
    frozenLabel: string | null; // null = live board
    payload: LeaderboardPayload | null; // last good payload, kept on errors
    stale: boolean; // true when the most recent poll failed
    lastError: string | null;
}

export class BoardPoller {
    readonly state: BoardState;
    private timer: ReturnType<typeof setInterval> | null = null;
    private inFlight = false;

    constructor(
        private api: ApiClient,
        stage: string,
        private intervalMs: number,
        private onUpdate: (state: BoardState) => void,
    ) {
        this.state = { stage, frozenLabel: null, payload: null, stale: false, lastError: null };
    }

    start(): void {
        if (this.timer !== null) return;
        void this.pollNow();
        this.timer = setInterval(() => void this.pollNow(), this.intervalMs);
    }

    stop(): void {
        if (this.timer !== null) {
            clearInterval(this.timer);
            this.timer = null;
        }
    }

    setStage(stage: string): void {
        this.state.stage = stage;
        this.state.frozenLabel = null;
        this.state.payload = null;
        void this.pollNow();
    }

    setFrozenLabel(label: string | null): void {
        this.state.frozenLabel = label;
        void this.pollNow();
    }

    async pollNow(): Promise<void> {
        if (this.inFlight) return; // never stack requests
        this.inFlight = true;
        try {
            const payload = await this.api.leaderboard(this.state.stage, this.state.frozenLabel);
            this.state.payload = payload;
            this.state.stale = false;
            this.state.lastError = null;
        } catch (err) {
            // keep the last good payload visible
            this.state.stale = true;
            this.state.lastError = err instanceof Error ? err.message : String(err);
        } finally {
            this.inFlight = false;
        }
        this.onUpdate(this.state);
    }
}
