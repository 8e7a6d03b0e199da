import type { ControllerState } from "./state.js";
import type { Metrics, ReviewItem } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;")
    .replaceAll("'", "&#39;");
}

export function renderQueue(items: ReviewItem[], selectedId: string | null): string {
  if (items.length === 0) {
    return '<p class="empty">Review queue is empty.</p>';
  }
  const rows = items
    .map((item) => {
      const cls = item.item_id === selectedId ? "queue-row selected" : "queue-row";
      return (
        `<li class="${cls}" data-item-id="${escapeHtml(item.item_id)}">` +
        `<span class="utterance">${escapeHtml(item.utterance_masked)}</span>` +
        `<span class="count">${item.candidates.length} candidates</span>` +
        `</li>`
      );
    })
    .join("");
  return `<ul class="queue">${rows}</ul>`;
}

export function renderItem(item: ReviewItem | null): string {
  if (item === null) {
    return '<p class="empty">Select an item from the queue.</p>';
  }
  const candidates = item.candidates
    .map((candidate, position) => {
      const top = position === 0 ? ' <span class="badge">top pick</span>' : "";
      return (
        `<tr>` +
        `<td>${position + 1}</td>` +
        `<td>${escapeHtml(candidate.title)}${top}</td>` +
        `<td>${candidate.final_score}</td>` +
        `<td>${candidate.support}</td>` +
        `<td><button data-action="choose" data-annotation-id="${escapeHtml(candidate.annotation_id)}">accept</button></td>` +
        `</tr>`
      );
    })
    .join("");
  const agents = Object.entries(item.agent_statuses)
    .map(([agent, status]) => `${escapeHtml(agent)}: ${escapeHtml(status)}`)
    .join(", ");
  return (
    `<div class="item" data-item-id="${escapeHtml(item.item_id)}">` +
    `<h2>${escapeHtml(item.utterance_masked)}</h2>` +
    `<p class="expanded">searched as: ${escapeHtml(item.expanded_query)}</p>` +
    `<table class="candidates">` +
    `<thead><tr><th>#</th><th>candidate</th><th>score</th><th>support</th><th></th></tr></thead>` +
    `<tbody>${candidates}</tbody>` +
    `</table>` +
    `<p class="agents">${agents}</p>` +
    `<div class="other-actions">` +
    `<input data-role="override-id" placeholder="catalog id" />` +
    `<button data-action="override">use this id instead</button>` +
    `<button data-action="reject-all">none of these</button>` +
    `</div>` +
    `</div>`
  );
}

export function renderMetrics(metrics: Metrics | null): string {
  if (metrics === null) {
    return "";
  }
  const weights = Object.entries(metrics.weights)
    .map(([agent, weight]) => `<li>${escapeHtml(agent)}: ${weight.toFixed(3)}</li>`)
    .join("");
  const review = metrics.review;
  return (
    `<dl class="metrics">` +
    `<dt>pending</dt><dd>${review.pending}</dd>` +
    `<dt>decisions</dt><dd>${review.decisions}</dd>` +
    `<dt>agreements</dt><dd>${review.agreements}</dd>` +
    `<dt>agreement rate</dt><dd>${(review.agreement_rate * 100).toFixed(1)}%</dd>` +
    `</dl>` +
    `<ul class="weights">${weights}</ul>`
  );
}

export function renderApp(state: ControllerState): string {
  const selected =
    state.items.find((item) => item.item_id === state.selectedId) ?? null;
  const notice = state.notice
    ? `<p class="notice">${escapeHtml(state.notice)}</p>`
    : "";
  return (
    `${notice}` +
    `<div class="columns">` +
    `<section class="left">${renderQueue(state.items, state.selectedId)}</section>` +
    `<section class="main">${renderItem(selected)}</section>` +
    `<aside class="right">${renderMetrics(state.metrics)}</aside>` +
    `</div>`
  );
}
