"""Fixed inputs for the golden prompt fixtures under ``fixtures/golden``."""
import numpy as np

from skillmem.designer import HardCase
from skillmem.memory import Retrieved, RetrievedSet
from skillmem.skills import init_primitives

SPAN = "Caroline: I moved to Lisbon last spring.\nMelanie: That is wonderful, how is the new job?"

RETRIEVED = RetrievedSet(
    (
        Retrieved(0, 7, "Caroline lives in Porto.", 0.81),
        Retrieved(1, 3, "Melanie started painting classes in 2022.", 0.42),
    )
)


def executor_skills():
    bank = init_primitives()
    return [bank.get("update"), bank.get("insert")]


def hard_cases():
    return [
        HardCase(
            key="t1/q4",
            query="When did Caroline move to Lisbon?",
            query_embedding=np.zeros(4),
            ground_truth="last spring",
            prediction="unknown",
            reward=0.0,
            failure_count=3,
            last_seen_step=120,
            retrieved_ids=[7],
            retrieved_texts=["Caroline lives in Porto."],
        ),
        HardCase(
            key="t2/q1",
            query="Where does Melanie take painting classes?",
            query_embedding=np.zeros(4),
            ground_truth="at the community center",
            prediction="in 2022",
            reward=0.25,
            failure_count=1,
            last_seen_step=118,
            retrieved_ids=[],
            retrieved_texts=[],
        ),
    ]


FEEDBACK = ["cycle 0: bank v0, tail reward 0.412 (improved)"]

ANALYSIS = {
    "failure_patterns": [
        {
            "pattern_name": "temporal details dropped",
            "affected_cases": [1],
            "root_cause": "storage_failure",
            "explanation": "Relative dates are not stored with the event.",
            "potential_fix": "Add a skill that records when events happen.",
        }
    ],
    "recommendations": [
        {
            "action": "add_new_operation",
            "target_operation": None,
            "rationale": "Temporal facts are never captured.",
            "priority": "high",
        }
    ],
    "summary": "Temporal details are missing from stored memories.",
}
