import { ReviewClient } from "./api.js";
import { ReviewController } from "./state.js";
import { renderApp } from "./view.js";

/**
 * Browser entry point. Service location and the reviewer name come from
 * query parameters so the page itself stays static:
 *
 *   index.html?base=http://localhost:8000&token=SECRET&reviewer=dana
 */
function boot(): void {
  const params = new URLSearchParams(window.location.search);
  const client = new ReviewClient({
    baseUrl: params.get("base") ?? "",
    token: params.get("token") ?? "",
  });
  const controller = new ReviewController(client, params.get("reviewer") ?? "reviewer");
  const root = document.getElementById("app");
  if (root === null) {
    throw new Error("missing #app element");
  }

  controller.onChange((state) => {
    root.innerHTML = renderApp(state);
  });

  root.addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    const row = target.closest<HTMLElement>(".queue-row");
    if (row?.dataset.itemId) {
      controller.select(row.dataset.itemId);
      return;
    }
    const action = target.dataset.action;
    const item = controller.selected();
    if (!action || item === null) {
      return;
    }
    const fail = (err: unknown) => {
      const detail = err instanceof Error ? err.message : String(err);
      window.alert(`decision failed: ${detail}`);
    };
    if (action === "choose" && target.dataset.annotationId) {
      controller.choose(item.item_id, target.dataset.annotationId).catch(fail);
    } else if (action === "override") {
      const input = root.querySelector<HTMLInputElement>('[data-role="override-id"]');
      const annotationId = input?.value.trim() ?? "";
      if (annotationId) {
        controller.override(item.item_id, annotationId).catch(fail);
      }
    } else if (action === "reject-all") {
      controller.rejectAll(item.item_id).catch(fail);
    }
  });

  controller.refresh().catch((err: unknown) => {
    root.innerHTML = `<p class="error">failed to load queue: ${String(err)}</p>`;
  });
  window.setInterval(() => {
    void controller.refresh().catch(() => undefined);
  }, 15000);
}

boot();
