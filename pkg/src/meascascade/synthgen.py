"""Seeded generator of annotated measurement documents with known gold.

Measurement sentences come from typed frames (entity, optional property,
quantity with unit and modifiers, optional qualifier) and are mixed with
filler sentences drawn from a pseudo-word vocabulary. Label and frame
requirements are scheduled up front so small corpora still cover every
modifier label and every question template.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .corpus import (
    ENTITY, HAS_PROPERTY, HAS_QUANTITY, PROPERTY, QUALIFIER, QUALIFIES, QUANTITY,
    AnnotatedDoc, Annotation, Corpus, Document, QuantityDetail, Relation, Span, validate_corpus,
)
from .errors import InfeasibleSpec

MODIFIER_LABELS = (
    "IsCount", "IsApproximate", "IsMean", "IsMedian", "IsRange", "IsList",
    "HasTolerance", "IsMeanHasTolerance", "IsMeanHasSD", "IsRangeHasTolerance", "Other",
)

# form name -> (modifier labels, surface patterns); {n}/{m}/{k} numbers, {t}/{s} tolerances, {u} unit
FORMS = {
    "plain": ((), ["{n} {u}"]),
    "approx": (("IsApproximate",), ["approximately {n} {u}", "about {n} {u}", "roughly {n} {u}",
                                    "~{n} {u}", "nearly {n} {u}"]),
    "count": (("IsCount",), ["{n}"]),
    "approx_count": (("IsApproximate", "IsCount"), ["approximately {n}", "about {n}", "roughly {n}"]),
    "range": (("IsRange",), ["between {n} and {m} {u}", "{n}-{m} {u}", "from {n} to {m} {u}"]),
    "list": (("IsList",), ["{n}, {m} and {k} {u}", "{n}, {m}, and {k} {u}"]),
    "mean": (("IsMean",), ["mean of {n} {u}", "average of {n} {u}"]),
    "median": (("IsMedian",), ["median of {n} {u}"]),
    "tol": (("HasTolerance",), ["{n} ± {t} {u}", "{n} {u} ± {t} {u}"]),
    "mean_tol": (("IsMeanHasTolerance",), ["mean of {n} ± {t} {u}", "average of {n} ± {t} {u}"]),
    "mean_sd": (("IsMeanHasSD",), ["mean of {n} {u} (SD {t})", "mean of {n} {u} (SD = {t})"]),
    "range_tol": (("IsRangeHasTolerance",), ["between {n} ± {t} and {m} ± {s} {u}"]),
    "other": (("Other",), ["more than {n} {u}", "at least {n} {u}", "less than {n} {u}",
                           "up to {n} {u}"]),
    # unit implied by the product, not present verbatim in the surface
    "dims": ((), ["{n} {u1} x {m} {u1}"]),
}
COUNT_FORMS = ("count", "approx_count")

PROPERTIES = {
    "mass": ["g", "kg", "mg"],
    "dry weight": ["g", "mg"],
    "length": ["mm", "cm", "m", "µm"],
    "depth": ["m", "cm", "km"],
    "thickness": ["mm", "µm", "cm"],
    "temperature": ["°C", "K"],
    "concentration": ["mg/L", "mmol/L", "ppm", "µg/g"],
    "duration": ["days", "h", "min"],
    "area": ["m²", "ha", "km²"],
    "velocity": ["m/s", "km/h", "cm/s"],
    "pressure": ["kPa", "MPa", "bar"],
    "volume": ["mL", "L", "m³"],
    "porosity": ["%"],
    "salinity": ["psu", "ppt"],
    "density": ["g/cm³", "kg/m³"],
    "discharge": ["m³/s", "L/s"],
    "pH": ["units"],
    "height": ["m", "cm"],
    "diameter": ["mm", "cm", "µm"],
    "age": ["years", "Ma", "ka"],
}
DIMS_UNITS = {"area": ("m", "m²"), "volume": ("cm", "cm³")}

ENTITIES = [
    "soil sample", "leaf", "sediment core", "water column", "specimen", "rock outcrop",
    "coral colony", "seedling", "oak tree", "sandstone layer", "river channel", "aquifer",
    "crater lake", "glacier", "basalt flow", "fish larva", "root system", "peat deposit",
    "ice sheet", "reef flat", "clay horizon", "lava dome", "tidal marsh", "alloy bar",
    "polymer film", "catalyst pellet", "bone fragment", "pollen grain", "meltwater stream",
    "limestone block", "fungal culture", "wheat plot", "steel beam", "quartz vein",
    "storm surge", "mangrove stand", "beetle population", "granite pluton", "snowpack",
    "cell culture",
]
COUNT_ENTITIES = [
    "seedlings", "individuals", "samples", "cores", "trees", "colonies", "specimens",
    "birds", "nests", "boreholes", "plots", "larvae", "fractures", "burrows", "patients",
    "wells", "grains", "clasts", "leaves", "transects",
]
SUBSTANCES = [
    "ethanol", "sodium chloride", "distilled water", "fertilizer", "seawater", "glucose",
    "nitric acid", "crushed basalt", "peat slurry", "buffer solution", "sucrose", "silica gel",
]
SUBSTANCE_UNITS = ["mL", "g", "mg", "L", "kg"]

QUALIFIERS = {
    QUANTITY: ["at room temperature", "after treatment", "under drought conditions",
               "during the dry season", "at high tide", "in winter", "before irrigation",
               "at the end of the experiment", "under laboratory conditions"],
    ENTITY: ["from the northern site", "in the control group", "near the outlet",
             "from the upper horizon", "at the southern margin", "in the grazed plots"],
    PROPERTY: ["on a dry-weight basis", "measured by gravimetry", "estimated from imagery",
               "derived from borehole logs", "corrected for drift"],
}

# measurement frames; {E} entity, {P} property, {Q} quantity, {XQ}/{XE}/{XP} qualifier slots
FRAMES_WITH_PROPERTY = [
    "The {P}{XP} of the {E}{XE} was {Q}{XQ}.",
    "The {E}{XE} had a {P}{XP} of {Q}{XQ}.",
    "A {P}{XP} of {Q}{XQ} was recorded for the {E}{XE}.",
    "For the {E}{XE}, the {P}{XP} reached {Q}{XQ}.",
]
FRAMES_COUNT_PROPERTY = [
    "The {P}{XP} of {E}{XE} was {Q}{XQ}.",
]
FRAMES_NO_PROPERTY = [
    "The {E}{XE} contained {Q}{XQ}.",
    "{Q}{XQ} of {E}{XE} was added.",
    "We used {Q}{XQ} of {E}{XE}.",
]
FRAMES_COUNT = [
    "We counted {Q} {E}{XE}{XQ}.",
    "In total, {Q} {E}{XE} were observed{XQ}.",
]

_SLOT_RE = re.compile(r"\{(P|E|Q|XQ|XE|XP)\}")


@dataclass
class GrammarSpec:
    seed: int = 7
    target_words: int = 160
    long_doc_fraction: float = 0.04
    long_doc_words: int = 620
    vocab_size: int = 8000
    # filler words follow Zipf-Mandelbrot rank frequencies, as running text does
    zipf_exponent: float = 1.0
    quantities_per_doc: tuple = (2, 4)
    # requested share of each quantity form; missing forms get weight 0
    form_weights: dict = field(default_factory=lambda: {
        "plain": 3.0, "approx": 1.0, "count": 1.0, "approx_count": 0.6, "range": 1.0,
        "list": 0.7, "mean": 0.8, "median": 0.6, "tol": 0.8, "mean_tol": 0.6, "mean_sd": 0.6,
        "range_tol": 0.5, "other": 0.8, "dims": 0.1,
    })
    property_fraction: float = 0.65
    qualifier_fraction: float = 0.5
    properties: dict = field(default_factory=lambda: dict(PROPERTIES))
    entities: list = field(default_factory=lambda: list(ENTITIES))
    count_entities: list = field(default_factory=lambda: list(COUNT_ENTITIES))
    substances: list = field(default_factory=lambda: list(SUBSTANCES))
    qualifiers: dict = field(default_factory=lambda: {k: list(v) for k, v in QUALIFIERS.items()})
    doc_prefix: str = "syn"

    def check(self):
        for name in ("properties", "entities", "count_entities", "substances"):
            if not getattr(self, name):
                raise InfeasibleSpec(f"lexicon {name!r} is empty")
        for kind, phrases in self.qualifiers.items():
            if not phrases and self.qualifier_fraction > 0:
                raise InfeasibleSpec(f"qualifier lexicon for {kind} is empty")
        if not any(w > 0 for w in self.form_weights.values()):
            raise InfeasibleSpec("all form weights are zero")
        if self.zipf_exponent < 0:
            raise InfeasibleSpec("zipf_exponent must be non-negative")
        lo, hi = self.quantities_per_doc
        if lo < 1 or hi < lo:
            raise InfeasibleSpec(f"bad quantities_per_doc {self.quantities_per_doc}")


@dataclass
class Frame:
    form: str
    has_property: bool
    qualifier_target: Optional[str]


@dataclass
class GenerationReport:
    n_docs: int
    form_counts: dict
    label_counts: dict
    requested_proportions: dict
    observed_proportions: dict
    template_counts: dict
    long_docs: int
    minimum_required: int

    def coverage_ok(self) -> bool:
        need = self.minimum_required
        return (all(self.label_counts.get(lbl, 0) >= need for lbl in MODIFIER_LABELS)
                and all(self.template_counts.get(t, 0) >= need for t in range(1, 7)))


def _pseudo_vocab(rng: np.random.Generator, size: int, reserved: set) -> list:
    onsets = ["b", "c", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "v", "z",
              "br", "cl", "dr", "gr", "pl", "st", "tr", "sh", "ch", "k"]
    vowels = ["a", "e", "i", "o", "u", "ai", "ou", "ea"]
    codas = ["", "n", "r", "s", "l", "m", "x", "nd", "st"]
    words, seen = [], set(reserved)
    while len(words) < size:
        n_syll = int(rng.integers(2, 4))
        w = "".join(onsets[rng.integers(len(onsets))] + vowels[rng.integers(len(vowels))]
                    + codas[rng.integers(len(codas))] for _ in range(n_syll))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _number(rng: np.random.Generator, integer=False, small=False) -> str:
    if integer:
        return str(int(rng.integers(2, 60 if small else 400)))
    if rng.random() < 0.4:
        return str(int(rng.integers(1, 1000)))
    decimals = int(rng.integers(1, 3))
    return f"{rng.uniform(0.1, 300):.{decimals}f}"


def _schedule(spec: GrammarSpec, rng: np.random.Generator, n_docs: int) -> list:
    """Per-document lists of frames meeting the coverage minimum."""
    need = max(1, math.ceil(n_docs / 20))
    lo, hi = spec.quantities_per_doc
    counts = [int(rng.integers(lo, hi + 1)) for _ in range(n_docs)]
    forms = [f for f, w in spec.form_weights.items() if w > 0]
    weights = np.array([spec.form_weights[f] for f in forms], dtype=float)
    weights /= weights.sum()

    required = []
    for label in MODIFIER_LABELS:
        carriers = [f for f in forms if label in FORMS[f][0]]
        if not carriers:
            raise InfeasibleSpec(f"no enabled form carries modifier {label}")
        required += [carriers[0]] * need
    # frame-shape requirements for question templates 2-6 (1 is asked for every quantity)
    shapes = ([(True, None)] * need + [(False, None)] * need + [(False, QUANTITY)] * need
              + [(False, ENTITY)] * need + [(True, PROPERTY)] * need)
    total_needed = max(len(required), len(shapes))
    i = 0
    while sum(counts) < total_needed:
        counts[i % n_docs] += 1
        i += 1
    total = sum(counts)

    chosen = required + list(rng.choice(forms, size=total - len(required), p=weights))
    chosen = [str(f) for f in chosen]
    order = rng.permutation(total)
    chosen = [chosen[j] for j in order]
    frames = []
    for q in range(total):
        if q < len(shapes):
            has_prop, target = shapes[q]
        else:
            has_prop = bool(rng.random() < spec.property_fraction)
            target = None
            if rng.random() < spec.qualifier_fraction:
                options = [QUANTITY, ENTITY] + ([PROPERTY] if has_prop else [])
                target = options[int(rng.integers(len(options)))]
        frames.append(Frame(chosen[q], has_prop, target))
    # shapes were placed first; shuffle them across documents too
    perm = rng.permutation(total)
    frames = [frames[j] for j in perm]
    out, pos = [], 0
    for c in counts:
        out.append(frames[pos:pos + c])
        pos += c
    return out


class _Builder:
    def __init__(self):
        self.parts: list[str] = []
        self.length = 0

    def add(self, text: str) -> Span | None:
        start = self.length
        self.parts.append(text)
        self.length += len(text)
        return Span(start, self.length) if text else None

    def text(self) -> str:
        return "".join(self.parts)


def _render_quantity(form: str, prop: Optional[str], spec: GrammarSpec, rng,
                     substance_unit: Optional[str] = None):
    mods, patterns = FORMS[form]
    pattern = patterns[int(rng.integers(len(patterns)))]
    unit = None
    values = {}
    if form == "dims":
        u1, unit = DIMS_UNITS.get(prop, ("m", "m²"))
        values["u1"] = u1
    elif form not in COUNT_FORMS:
        if substance_unit is not None:
            unit = substance_unit
        else:
            units = spec.properties[prop]
            unit = units[int(rng.integers(len(units)))]
        values["u"] = unit
    count = form in COUNT_FORMS
    for key in ("n", "m", "k"):
        values[key] = _number(rng, integer=count, small=False)
    for key in ("t", "s"):
        values[key] = _number(rng, integer=False, small=True)
    if form in ("range", "range_tol"):
        lo, hi = sorted([float(values["n"]), float(values["m"])])
        if lo == hi:
            hi = lo + 1
        values["n"], values["m"] = _fmt(lo), _fmt(hi)
    return pattern.format(**values), unit, mods


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:.2f}".rstrip("0")


def _sentence(frame: Frame, spec: GrammarSpec, rng, used: dict):
    """Pick a surface frame and lexical fillers; return template plus slot values."""
    count = frame.form in COUNT_FORMS

    def pick(pool_name, pool):
        free = [x for x in pool if x not in used[pool_name]]
        choice = (free or pool)[int(rng.integers(len(free or pool)))]
        used[pool_name].add(choice)
        return choice

    prop = None
    substance_unit = None
    if frame.has_property:
        if count:
            template = FRAMES_COUNT_PROPERTY[0]
            prop = "number"
            entity = pick("count_entities", spec.count_entities)
        else:
            template = FRAMES_WITH_PROPERTY[int(rng.integers(len(FRAMES_WITH_PROPERTY)))]
            props = list(spec.properties)
            if frame.form == "dims":
                props = [p for p in props if p in DIMS_UNITS] or props
            prop = pick("properties", props)
            entity = pick("entities", spec.entities)
    else:
        if count:
            template = FRAMES_COUNT[int(rng.integers(len(FRAMES_COUNT)))]
            entity = pick("count_entities", spec.count_entities)
        elif frame.form == "dims":
            template = FRAMES_NO_PROPERTY[0]
            entity = pick("entities", spec.entities)
            prop_for_units = "area"
        else:
            template = FRAMES_NO_PROPERTY[int(rng.integers(len(FRAMES_NO_PROPERTY)))]
            if template == FRAMES_NO_PROPERTY[0]:
                entity = pick("entities", spec.entities)
            else:
                entity = pick("substances", spec.substances)
            substance_unit = SUBSTANCE_UNITS[int(rng.integers(len(SUBSTANCE_UNITS)))]
    if not frame.has_property and frame.form == "dims":
        q_surface, unit, mods = _render_quantity("dims", prop_for_units, spec, rng)
    else:
        q_surface, unit, mods = _render_quantity(frame.form, prop, spec, rng, substance_unit)
    qualifier = None
    if frame.qualifier_target is not None:
        qualifier = pick("qual_" + frame.qualifier_target, spec.qualifiers[frame.qualifier_target])
    return template, {"P": prop, "E": entity, "Q": q_surface}, unit, mods, qualifier


def generate(spec: GrammarSpec | None = None, n_docs: int = 20) -> tuple[Corpus, GenerationReport]:
    """Generate ``n_docs`` documents; identical output for identical spec and seed."""
    spec = spec or GrammarSpec()
    if n_docs < 1:
        raise InfeasibleSpec("n_docs must be >= 1")
    spec.check()
    rng = np.random.default_rng(spec.seed)
    reserved = {w.lower() for p in spec.properties for w in p.split()}
    reserved |= {w.lower() for e in spec.entities + spec.count_entities + spec.substances
                 for w in e.split()}
    vocab = _pseudo_vocab(rng, spec.vocab_size, reserved)
    word_p = 1.0 / (np.arange(len(vocab)) + 2.7) ** spec.zipf_exponent
    word_p /= word_p.sum()
    schedule = _schedule(spec, rng, n_docs)
    n_long = int(round(spec.long_doc_fraction * n_docs))
    long_ids = set(rng.choice(n_docs, size=n_long, replace=False).tolist()) if n_long else set()

    corpus = Corpus()
    forms_seen, labels_seen, templates_seen = Counter(), Counter(), Counter()
    width = max(4, len(str(n_docs)))
    for d, frames in enumerate(schedule):
        doc_id = f"{spec.doc_prefix}{d:0{width}d}"
        used = {k: set() for k in ("properties", "entities", "count_entities", "substances",
                                   "qual_" + QUANTITY, "qual_" + ENTITY, "qual_" + PROPERTY)}
        sentences = []
        surfaces = set()
        for frame in frames:
            for _ in range(20):
                rendered = _sentence(frame, spec, rng, used)
                if rendered[1]["Q"] not in surfaces:
                    break
            surfaces.add(rendered[1]["Q"])
            sentences.append((frame, rendered))
        measure_words = sum(len(_fill_plain(r).split()) for _, r in sentences)
        target = spec.long_doc_words if d in long_ids else spec.target_words
        target = int(rng.normal(target, target * 0.1))
        fillers = []
        remaining = target - measure_words
        while remaining > 3:
            n = int(min(remaining, rng.integers(8, 22)))
            words = [vocab[int(i)] for i in rng.choice(len(vocab), size=n, p=word_p)]
            words[0] = words[0].capitalize()
            fillers.append(" ".join(words) + ".")
            remaining -= n
        slots = ["M"] * len(sentences) + ["F"] * len(fillers)
        slots = [slots[j] for j in rng.permutation(len(slots))]

        b = _Builder()
        annotations, relations = [], []
        next_id = [1]
        mi = fi = 0

        def new_id():
            i = next_id[0]
            next_id[0] += 1
            return f"T{i}"

        for k, slot in enumerate(slots):
            if k:
                b.add(" ")
            if slot == "F":
                b.add(fillers[fi])
                fi += 1
                continue
            frame, (template, values, unit, mods, qualifier) = sentences[mi]
            annot_set = mi + 1
            mi += 1
            spans = {}
            pieces = _SLOT_RE.split(template)
            for j, piece in enumerate(pieces):
                if j % 2 == 0:
                    b.add(piece)
                    continue
                slot_name = piece
                if slot_name in ("P", "E", "Q"):
                    spans[slot_name] = b.add(values[slot_name])
                else:
                    target_kind = {"XQ": QUANTITY, "XE": ENTITY, "XP": PROPERTY}[slot_name]
                    if qualifier is not None and frame.qualifier_target == target_kind:
                        b.add(" ")
                        spans["X"] = b.add(qualifier)
            q_id = new_id()
            annotations.append(Annotation(q_id, annot_set, QUANTITY, spans["Q"], values["Q"],
                                          QuantityDetail(unit, tuple(mods))))
            e_id = new_id()
            annotations.append(Annotation(e_id, annot_set, ENTITY, spans["E"], values["E"]))
            p_id = None
            if values["P"] is not None:
                p_id = new_id()
                annotations.append(Annotation(p_id, annot_set, PROPERTY, spans["P"], values["P"]))
                relations.append(Relation(HAS_QUANTITY, p_id, q_id))
                relations.append(Relation(HAS_PROPERTY, e_id, p_id))
                templates_seen.update([1, 2])
            else:
                relations.append(Relation(HAS_QUANTITY, e_id, q_id))
                templates_seen.update([3])
            if "X" in spans:
                x_id = new_id()
                annotations.append(Annotation(x_id, annot_set, QUALIFIER, spans["X"], qualifier))
                target_id = {QUANTITY: q_id, ENTITY: e_id, PROPERTY: p_id}[frame.qualifier_target]
                relations.append(Relation(QUALIFIES, x_id, target_id))
                templates_seen.update([{QUANTITY: 4, ENTITY: 5, PROPERTY: 6}[frame.qualifier_target]])
            forms_seen[frame.form] += 1
            labels_seen.update(mods)
        corpus.docs.append(AnnotatedDoc(Document(doc_id, b.text()), annotations, relations))

    validate_corpus(corpus)
    total_forms = sum(forms_seen.values())
    weights = {f: w for f, w in spec.form_weights.items() if w > 0}
    wsum = sum(weights.values())
    report = GenerationReport(
        n_docs=n_docs,
        form_counts=dict(sorted(forms_seen.items())),
        label_counts={lbl: labels_seen.get(lbl, 0) for lbl in MODIFIER_LABELS},
        requested_proportions={f: w / wsum for f, w in sorted(weights.items())},
        observed_proportions={f: forms_seen.get(f, 0) / total_forms for f in sorted(weights)},
        template_counts={t: templates_seen.get(t, 0) for t in range(1, 7)},
        long_docs=len(long_ids),
        minimum_required=max(1, math.ceil(n_docs / 20)),
    )
    # template 1 is asked for every quantity, whether or not it has an answer
    report.template_counts[1] = total_forms
    return corpus, report


def _fill_plain(rendered) -> str:
    template, values, _, _, qualifier = rendered
    out = template
    for k, v in values.items():
        out = out.replace("{" + k + "}", v or "")
    out = re.sub(r"\{X[QEP]\}", "", out)
    return out + ((" " + qualifier) if qualifier else "")
