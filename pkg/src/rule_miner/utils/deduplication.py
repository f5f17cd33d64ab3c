"""Deduplication of mined rules by their (antecedent, consequent) key."""

import logging
from collections import defaultdict
from typing import Any, Dict, Hashable, Iterable, List, Set


logger = logging.getLogger(__name__)


class RuleDeduplicator:
    """
    Tracks distinct rule keys per scope.

    Features:
    - First-seen ordering of keys
    - Per-scope tracking (e.g. one scope per training run or mining pass)
    - Per-step discovery counts for cumulative timelines
    """

    def __init__(self, max_keys_per_scope: int = 1_000_000):
        self.max_keys_per_scope = max_keys_per_scope

        # scope -> set of seen keys, plus first-seen order
        self._seen: Dict[str, Set[Hashable]] = defaultdict(set)
        self._order: Dict[str, List[Hashable]] = defaultdict(list)

        self.stats = {
            'total_checks': 0,
            'duplicates_found': 0,
            'unique_rules': 0,
            'keys_dropped': 0,
        }

        logger.debug(f"RuleDeduplicator initialized: max_per_scope={max_keys_per_scope}")

    def is_unique(self, key: Hashable, scope: str = "default") -> bool:
        """
        Register ``key`` in ``scope``.

        Returns:
            True the first time the key is seen in the scope, False afterwards
        """
        self.stats['total_checks'] += 1

        if key in self._seen[scope]:
            self.stats['duplicates_found'] += 1
            return False

        if len(self._seen[scope]) >= self.max_keys_per_scope:
            self.stats['keys_dropped'] += 1
            logger.warning(f"Scope {scope} reached {self.max_keys_per_scope} keys; {key!r} not tracked")
            return False

        self._seen[scope].add(key)
        self._order[scope].append(key)
        self.stats['unique_rules'] += 1
        return True

    def observe_step(self, keys: Iterable[Hashable], scope: str = "default") -> int:
        """Register one step's rule keys; returns the distinct count so far."""
        for key in keys:
            self.is_unique(key, scope)
        return len(self._seen[scope])

    def count(self, scope: str = "default") -> int:
        return len(self._seen.get(scope, ()))

    def keys(self, scope: str = "default") -> List[Hashable]:
        return list(self._order.get(scope, ()))

    def clear_scope(self, scope: str):
        if scope in self._seen:
            count = len(self._seen[scope])
            del self._seen[scope]
            del self._order[scope]
            logger.debug(f"Cleared {count} rule keys for scope {scope}")

    def get_stats(self) -> Dict[str, Any]:
        duplicate_rate = 0.0
        if self.stats['total_checks'] > 0:
            duplicate_rate = self.stats['duplicates_found'] / self.stats['total_checks']
        return {
            **self.stats,
            'duplicate_rate': duplicate_rate,
            'scope_counts': {scope: len(keys) for scope, keys in self._seen.items()},
        }
