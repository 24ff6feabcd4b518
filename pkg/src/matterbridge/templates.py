"""Instruction/answer template registry and attribute surface forms.

Templates live in ``data/templates/<task>.txt``, one group per file with
``# instructions`` and ``# answers`` sections.  Prompts keep the literal
``<material structure>`` placeholder (the structure itself enters
through the graph branch; the sample's material_id records the
binding).  Answers substitute ``<material attribute>`` with the task's
formatted attribute.

Twelve tasks carry answers and are evaluated; the ``generate`` and
``general`` groups are auxiliary prompt-only material.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

from .errors import ContractError, ValidationError

STRUCTURE_TOKEN = "<material structure>"
ATTRIBUTE_TOKEN = "<material attribute>"

# description tasks first, then property tasks; order is the canonical
# task enumeration used by dataset builds
TASKS = (
    "formula",
    "space_group",
    "crystal_system",
    "is_metal",
    "direct_bandgap",
    "stability",
    "exp_observed",
    "is_magnetic",
    "magnetic_order",
    "bandgap",
    "formation_energy",
    "energy_above_hull",
)
AUXILIARY = ("generate", "general")

NUMERIC_TASKS = ("bandgap", "formation_energy", "energy_above_hull")

# fixed classification surface forms: (value when True, value when False)
BINARY_FORMS = {
    "is_metal": ("metal", "non-metal"),
    "direct_bandgap": ("direct", "indirect"),
    "stability": ("stable", "not stable"),
    "exp_observed": ("experimentally observed", "not experimentally observed"),
    "is_magnetic": ("magnetic", "non-magnetic"),
}

MAGNETIC_ORDERS = ("NM", "FM", "AFM", "FiM")
CRYSTAL_SYSTEMS = (
    "triclinic", "monoclinic", "orthorhombic", "tetragonal",
    "trigonal", "hexagonal", "cubic",
)


@dataclass(frozen=True)
class TemplateGroup:
    task: str
    instructions: tuple
    answers: tuple
    auxiliary: bool


def _load_group(task):
    ref = resources.files("matterbridge.data.templates").joinpath(f"{task}.txt")
    section = None
    instructions, answers = [], []
    for raw in ref.read_text(encoding="utf-8").splitlines():
        if raw == "# instructions":
            section = instructions
        elif raw == "# answers":
            section = answers
        elif raw.strip():
            if section is None:
                raise ValidationError(f"template file {task} lacks a section header")
            section.append(raw)
    return TemplateGroup(
        task=task,
        instructions=tuple(instructions),
        answers=tuple(answers),
        auxiliary=task in AUXILIARY,
    )


_CACHE = {}


def get_templates(task):
    if task not in TASKS and task not in AUXILIARY:
        raise ContractError(f"unknown task {task!r}")
    if task not in _CACHE:
        _CACHE[task] = _load_group(task)
    return _CACHE[task]


def format_value(x, kind):
    """Fixed 5-decimal rendering with a unit suffix (round-half-even)."""
    x = float(x)
    if not abs(x) < float("inf"):
        raise ContractError(f"non-finite value {x}")
    if kind == "energy_per_atom":
        unit = "eV/atom"
    elif kind == "energy":
        unit = "eV"
    else:
        raise ContractError(f"unknown value kind {kind!r}")
    return f"{x:.5f} {unit}"


def attribute_text(record, task):
    """The attribute surface form a rendered answer embeds for ``task``."""
    if task == "formula":
        return record.reduced_formula
    if task == "space_group":
        return record.space_group
    if task == "crystal_system":
        return record.crystal_system
    if task in BINARY_FORMS:
        flag = {
            "is_metal": record.is_metal,
            "direct_bandgap": record.is_direct_bandgap,
            "stability": record.is_stable,
            "exp_observed": record.is_experimentally_observed,
            "is_magnetic": record.is_magnetic,
        }[task]
        yes, no = BINARY_FORMS[task]
        return yes if flag else no
    if task == "magnetic_order":
        return record.magnetic_order
    if task == "bandgap":
        return format_value(record.bandgap, "energy")
    if task == "formation_energy":
        return format_value(record.formation_energy, "energy_per_atom")
    if task == "energy_above_hull":
        return format_value(record.energy_above_hull, "energy_per_atom")
    raise ContractError(f"unknown task {task!r}")


def numeric_target(record, task):
    if task == "bandgap":
        return float(record.bandgap)
    if task == "formation_energy":
        return float(record.formation_energy)
    if task == "energy_above_hull":
        return float(record.energy_above_hull)
    return None


def render_prompt(task, instr_idx):
    group = get_templates(task)
    if not 0 <= instr_idx < len(group.instructions):
        raise ContractError(
            f"instruction index {instr_idx} out of range for {task}"
        )
    return group.instructions[instr_idx]


def render_answer(record, task, ans_idx):
    group = get_templates(task)
    if group.auxiliary:
        raise ContractError(f"task {task!r} has no answer templates")
    if not 0 <= ans_idx < len(group.answers):
        raise ContractError(f"answer index {ans_idx} out of range for {task}")
    return group.answers[ans_idx].replace(ATTRIBUTE_TOKEN, attribute_text(record, task))
