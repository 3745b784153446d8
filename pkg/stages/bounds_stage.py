# stages/bounds_stage.py
from typing import Any, Dict

import pandas as pd

from bats.bounds import verify_bounds
from bats.errors import NumericalError
from stages.base_stage import BaseStage
from utils.helpers import write_json


class VerifyBoundsStage(BaseStage):
    def __init__(self, config) -> None:
        super().__init__(
            name="verify-bounds",
            description="Certify the value sandwich on seeded random tabular instances.",
            config=config,
        )

    def process_request(self, inputs: Dict[str, Any]) -> Dict[str, Any]:
        n = int(inputs.get("instances") or 100)
        report = verify_bounds(self.seed(), n_instances=n)
        write_json(self.paths.bounds_report, {k: v for k, v in report.items() if k != "instances"})
        table = self.paths.root / "bounds_instances.csv"
        pd.DataFrame(report["instances"]).to_csv(table, index=False)
        self.produced(self.paths.bounds_report, table)

        summary = {k: report[k] for k in (
            "n_instances", "sandwich_violations", "improvement_fired", "improvement_violations",
            "max_expansion_error", "max_lipschitz_gap", "passed",
        )}
        if not report["passed"]:
            raise NumericalError(f"bound verification failed: {summary}")
        return summary
