"""Pass/fail records shared by the verification and gradient-check suites."""
import json
import logging
from collections.abc import Sequence
from pathlib import Path

from pydantic import BaseModel

logger = logging.getLogger(__name__)


class CheckResult(BaseModel):
    name: str
    passed: bool
    metric: float
    threshold: float
    cases: int = 1
    detail: str = ""

    @property
    def status(self) -> str:
        return "pass" if self.passed else "FAIL"


def failed_names(results: Sequence[CheckResult]) -> list[str]:
    return [result.name for result in results if not result.passed]


def write_check_report(results: Sequence[CheckResult], path: Path, seed: int) -> None:
    """Writes the seed and results as sorted-key JSON so reruns with one seed are byte-identical."""
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"seed": seed, "results": [result.model_dump() for result in results]}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Wrote %d check results to %s", len(results), path)


def read_check_report(path: Path) -> list[CheckResult]:
    payload = json.loads(path.read_text(encoding="utf-8"))
    return [CheckResult(**row) for row in payload["results"]]
