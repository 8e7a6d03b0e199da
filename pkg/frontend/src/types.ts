/** Payload shapes for the /v1 review endpoints. */

export interface Candidate {
  annotation_id: string;
  title: string;
  final_score: number;
  support: number;
  reasoning: string;
}

export interface Decision {
  reviewer: string;
  chosen_id: string | null;
  override_id: string | null;
  reject_all: boolean;
  decided_s: number;
}

export interface ReviewItem {
  item_id: string;
  utterance_masked: string;
  expanded_query: string;
  candidates: Candidate[];
  per_agent_top: Record<string, string | null>;
  agent_statuses: Record<string, string>;
  created_s: number;
  status: "pending" | "decided";
  decision: Decision | null;
}

/** Exactly one of chosen_id / override_id / reject_all must be set. */
export interface DecisionRequest {
  reviewer: string;
  chosen_id?: string | null;
  override_id?: string | null;
  reject_all?: boolean;
}

export interface DecisionResponse {
  item: ReviewItem;
  agreement: boolean;
}

export interface ReviewMetrics {
  pending: number;
  decisions: number;
  agreements: number;
  agreement_rate: number;
}

export interface Metrics {
  requests: number;
  review: ReviewMetrics;
  weights: Record<string, number>;
  /** The service reports more (latency percentiles, band fractions, ...). */
  [extra: string]: unknown;
}

export interface ErrorBody {
  error: string;
  detail: unknown;
}
