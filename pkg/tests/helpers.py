"""Shared test utilities that are not fixtures."""

from __future__ import annotations

import json
import threading
import time

from labelforge.providers import MockProvider


class TickingClock:
    """Virtual clock advanced by a background ticker thread.

    Unlike ManualClock, concurrent sleepers overlap: each blocks until the
    shared virtual time passes its own wake point, so parallel code measures
    parallel (not summed) elapsed time, compressed ~10x against real time.
    """

    def __init__(self, start_s: float = 0.0, tick_virtual_ms: float = 5.0,
                 tick_real_s: float = 0.0005):
        self._now_ms = start_s * 1000.0
        self._cond = threading.Condition()
        self._stop = False
        self._tick_virtual_ms = tick_virtual_ms
        self._tick_real_s = tick_real_s
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while True:
            time.sleep(self._tick_real_s)
            with self._cond:
                if self._stop:
                    return
                self._now_ms += self._tick_virtual_ms
                self._cond.notify_all()

    def now_s(self) -> float:
        with self._cond:
            return self._now_ms / 1000.0

    def monotonic_ms(self) -> float:
        with self._cond:
            return self._now_ms

    def sleep_ms(self, duration_ms: float) -> None:
        with self._cond:
            deadline = self._now_ms + duration_ms
            while self._now_ms < deadline and not self._stop:
                self._cond.wait(timeout=1.0)

    def stop(self) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify_all()


class LowScoreJudgeMock(MockProvider):
    """Mock whose judge assigns low final scores, forcing the LOW band."""

    def __init__(self, *args, top_score: int = 40, **kwargs):
        super().__init__(*args, **kwargs)
        self.top_score = top_score

    def _render_judge(self, request):
        data = json.loads(super()._render_judge(request))
        for i, item in enumerate(data["reranked_annotations"]):
            item["final_score"] = max(0, self.top_score - i)
        data["confidence"] = "LOW"
        return json.dumps(data)
