"""Agent memory built from learned, evolving memory skills.

A controller picks a Top-K subset of skills per span, an LLM executor
applies them to a trace-specific memory bank, PPO trains the controller on
downstream answer quality, and a designer periodically evolves the shared
skill bank from mined hard cases.
"""
from .controller import Controller, ControllerParams, joint_log_prob, sample_topk
from .embedding import HashEmbedder, cosine, hash_embed
from .memory import MemoryBank
from .skills import Skill, SkillBank, apply_proposal, init_primitives

__version__ = "0.1.0"

__all__ = [
    "Controller",
    "ControllerParams",
    "HashEmbedder",
    "MemoryBank",
    "Skill",
    "SkillBank",
    "apply_proposal",
    "cosine",
    "hash_embed",
    "init_primitives",
    "joint_log_prob",
    "sample_topk",
]
