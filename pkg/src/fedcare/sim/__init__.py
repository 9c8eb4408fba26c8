from .cohort import ScenarioSpec, generate_cohort
from .scenario import run_scenario
from .verify import verify_report

__all__ = ["ScenarioSpec", "generate_cohort", "run_scenario", "verify_report"]
