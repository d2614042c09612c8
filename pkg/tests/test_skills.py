import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillmem.skills import (
    AddSkill,
    EvolutionProposal,
    RefineSkill,
    Skill,
    SkillBank,
    SkillValidationError,
    SnapshotStore,
    apply_proposal,
    diff_banks,
    init_primitives,
    load_bank,
    save_bank,
)
from skillmem.templates import load_asset


def _add(name="capture_dates", update_type="insert"):
    return AddSkill(name, f"desc {name}", f"Skill: {name}\nAction type: INSERT only.", update_type)


def test_init_primitives_shape():
    bank = init_primitives()
    assert bank.version == 0 and len(bank) == 4
    assert bank.names == ["insert", "update", "delete", "noop"]
    assert [s.update_type for s in bank.skills] == ["insert", "update", "delete", "noop"]
    for s, asset in zip(bank.skills, ["skill_insert", "skill_update", "skill_delete", "skill_noop"]):
        assert s.instruction_template == load_asset(asset)
        assert s.description and s.description in s.instruction_template


def test_init_primitives_byte_identical():
    assert init_primitives().to_json() == init_primitives().to_json()


def test_schema_key_order():
    d = json.loads(init_primitives().to_json())
    assert list(d) == ["version", "parent_version", "skills"]
    assert list(d["skills"][0]) == ["name", "description", "instruction_template", "update_type", "origin", "created_step"]


def test_snapshot_restore_round_trip(tmp_path):
    store = SnapshotStore(tmp_path)
    b0 = init_primitives()
    b1 = apply_proposal(b0, EvolutionProposal("apply_changes", (_add(),)))
    i0, i1 = store.snapshot(b0), store.snapshot(b1)
    assert store.restore(i0) == b0 and store.restore(i1) == b1
    assert SnapshotStore(tmp_path).restore(i1) == b1  # reload from disk
    with pytest.raises(KeyError):
        store.restore("snap-9999-v9")


def test_add_skill_increments():
    b = init_primitives()
    nb = apply_proposal(b, EvolutionProposal("apply_changes", (_add(),)), round_index=2, step=40)
    assert len(nb) == 5 and nb.version == 1 and nb.parent_version == 0
    assert nb.skills[-1].origin == "designer_added:2" and nb.skills[-1].created_step == 40


def test_refine_in_place():
    b = init_primitives()
    nb = apply_proposal(b, EvolutionProposal("apply_changes", (RefineSkill("insert", new_description="better"),)))
    assert len(nb) == 4 and nb.version == 1 and nb.names == b.names
    assert nb.get("insert").description == "better"
    assert nb.get("insert").instruction_template == b.get("insert").instruction_template
    assert nb.get("insert").update_type == "insert"
    assert nb.get("insert").origin.startswith("designer_refined")


@pytest.mark.parametrize(
    "changes",
    [
        (RefineSkill("insert", new_description="a"), RefineSkill("insert", new_description="b")),
        (RefineSkill("missing", new_description="a"),),
        (_add("insert"),),
        (_add("x", update_type="delete"),),
        (_add("x", update_type="noop"),),
        (RefineSkill("delete", new_description="a"),),
        (RefineSkill("insert", new_description="   "),),
    ],
)
def test_invalid_proposals_rejected_and_input_untouched(changes):
    b = init_primitives()
    before = b.to_json()
    with pytest.raises(SkillValidationError):
        apply_proposal(b, EvolutionProposal("apply_changes", changes))
    assert b.to_json() == before


def test_skill_invariants():
    with pytest.raises(SkillValidationError):
        Skill("Bad Name", "d", "t", "insert")
    with pytest.raises(SkillValidationError):
        Skill("ok", "", "t", "insert")
    with pytest.raises(SkillValidationError):
        Skill("ok", "d", "t", "delete", origin="designer_added:1")
    with pytest.raises(SkillValidationError):
        SkillBank(0, ())
    with pytest.raises(SkillValidationError):
        SkillBank(0, (Skill("a", "d", "t", "insert"), Skill("a", "d", "t", "insert")))


def test_explicit_version_must_grow():
    b = init_primitives()
    assert apply_proposal(b, EvolutionProposal.no_change(), new_version=7).version == 7
    with pytest.raises(SkillValidationError):
        apply_proposal(b, EvolutionProposal.no_change(), new_version=0)


def test_save_load_and_diff(tmp_path):
    b = init_primitives()
    nb = apply_proposal(b, EvolutionProposal("apply_changes", (_add(), RefineSkill("update", new_instruction_template="T"))))
    p = save_bank(nb, tmp_path)
    assert p.name == "bank_v0001.json" and load_bank(p) == nb
    assert diff_banks(b, nb) == {"added": ["capture_dates"], "removed": [], "refined": ["update"]}


# -- properties ---------------------------------------------------------------

names = st.from_regex(r"[a-z][a-z0-9_]{0,8}", fullmatch=True)
texts = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=30).filter(str.strip)


@st.composite
def proposals(draw):
    bank = init_primitives()
    add_names = draw(st.lists(names.filter(lambda n: n not in bank.names), unique=True, max_size=3))
    refine_targets = draw(st.lists(st.sampled_from(["insert", "update"]), unique=True, max_size=2))
    changes = [AddSkill(n, draw(texts), draw(texts), draw(st.sampled_from(["insert", "update"]))) for n in add_names]
    changes += [RefineSkill(t, new_description=draw(texts)) for t in refine_targets]
    changes = draw(st.permutations(changes))
    return bank, EvolutionProposal("apply_changes", tuple(changes))


@settings(max_examples=60)
@given(proposals())
def test_apply_cardinality_and_untargeted_fields(case):
    bank, prop = case
    nb = apply_proposal(bank, prop)
    assert len(nb) == len(bank) + len(prop.adds)
    targeted = {c.target for c in prop.changes}
    for s in bank.skills:
        if s.name not in targeted:
            assert nb.get(s.name) == s
    assert nb.names[len(bank):] == [a.name for a in prop.adds]


@settings(max_examples=60)
@given(proposals())
def test_serialization_round_trip(case):
    bank, prop = case
    nb = apply_proposal(bank, prop)
    assert SkillBank.from_json(nb.to_json()) == nb
