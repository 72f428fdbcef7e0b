"""Sampler and performance monitoring"""

import functools
import threading
import time
from collections import defaultdict, deque
from typing import Any, Callable, Dict, List

import structlog

logger = structlog.get_logger(__name__)


class SamplerMonitor:
    """Track Metropolis-Hastings acceptance and operation timings"""

    def __init__(self, alert_threshold_seconds: float = 60.0):
        self.alert_threshold = alert_threshold_seconds
        self.proposals: Dict[str, int] = defaultdict(int)
        self.acceptances: Dict[str, int] = defaultdict(int)
        self.recent_operations = deque(maxlen=1000)
        self._lock = threading.Lock()

    def merge_mh(self, counts: Dict[str, List[int]]) -> None:
        """Merge ``{step: [proposals, acceptances]}`` collected without the lock"""
        with self._lock:
            for step, (n_prop, n_acc) in counts.items():
                self.proposals[step] += n_prop
                self.acceptances[step] += n_acc

    def acceptance_rates(self) -> Dict[str, float]:
        with self._lock:
            return {
                step: self.acceptances[step] / n
                for step, n in self.proposals.items()
                if n > 0
            }

    def record_operation(self, operation: str, elapsed: float, error: str = None) -> None:
        """Record an operation's wall time"""
        with self._lock:
            slow = elapsed > self.alert_threshold
            if slow:
                logger.warning("Slow operation detected",
                               operation=operation,
                               elapsed=round(elapsed, 3),
                               threshold=self.alert_threshold)
            self.recent_operations.append({
                'operation': operation,
                'elapsed': elapsed,
                'error': error,
                'slow': slow
            })

    def get_metrics(self) -> Dict[str, Any]:
        """Summarize acceptance rates and timings per operation"""
        rates = self.acceptance_rates()
        with self._lock:
            timings: Dict[str, Dict[str, float]] = {}
            for op in self.recent_operations:
                entry = timings.setdefault(op['operation'], {'count': 0, 'total_time': 0.0, 'errors': 0})
                entry['count'] += 1
                entry['total_time'] += op['elapsed']
                if op['error']:
                    entry['errors'] += 1
            for entry in timings.values():
                entry['average_time'] = round(entry['total_time'] / entry['count'], 4)
                entry['total_time'] = round(entry['total_time'], 4)
        return {
            'acceptance_rates': {k: round(v, 4) for k, v in sorted(rates.items())},
            'operations': timings,
        }

    def reset(self) -> None:
        with self._lock:
            self.proposals.clear()
            self.acceptances.clear()
            self.recent_operations.clear()


# Global monitor instance
monitor = SamplerMonitor()


def monitor_performance(func: Callable) -> Callable:
    """Decorator timing a service entry point on the global monitor"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        error = None
        try:
            return func(*args, **kwargs)
        except Exception as e:
            error = str(e)
            raise
        finally:
            monitor.record_operation(func.__qualname__, time.perf_counter() - start_time, error)

    return wrapper
