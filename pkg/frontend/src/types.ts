// Payload shapes of the public JSON contracts. The UI renders only what
// these carry: anonymity is preserved by construction.

export interface LeaderboardRow {
    rank: number;
    display_name: string;
    best_score: number | null;
    submission_count: number;
    last_submission_at: string | null;
    badges: string[];
    verification_flag: string;
}

export interface LeaderboardPayload {
    snapshot_id: number | null;
    created_at: string | null;
    stage_id: string;
    evaluator_version: number;
    frozen: boolean;
    freeze_label: string | null;
    rows: LeaderboardRow[];
    frozen_labels: string[];
}

export interface BadgeAward {
    badge_id: string;
    team: string;
    awarded_at: string;
    origin: string;
}

export interface StageInfo {
    stage_id: string;
    kind: string;
    open: string;
    close: string;
    aggregation_cadence_s: number;
}

export interface UiConfig {
    title: string;
    discussion_url: string | null;
    stages: StageInfo[];
}

export interface VerificationStatus {
    queued: number;
    entries: Array<{
        submission_id: number;
        evaluator_version: number;
        attempts: number;
        next_attempt_at: string | null;
    }>;
    alerts: string[];
}
