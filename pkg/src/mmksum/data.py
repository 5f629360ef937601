"""Dataset schema, JSONL ingestion, and the synthetic clinic-dialogue generator.

Synthetic corpora are templated stand-ins for real clinical data: every
record carries a patient/doctor exchange, a matching visual feature vector
(symptom-indicator one-hot block plus Gaussian noise), and three gold
targets chosen so that the concern summary (mcs) shares strictly more
content with the overall summary than the doctor impression (di) does.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SchemaError
from .text import normalize

SPEAKERS = ("patient", "doctor")


@dataclass(frozen=True)
class Utterance:
    speaker: str
    text: str


@dataclass(frozen=True)
class SummaryTriple:
    mcs: str
    di: str
    summary: str


@dataclass(frozen=True)
class Dialogue:
    id: str
    utterances: tuple[Utterance, ...]
    visual: tuple[float, ...] | None
    targets: SummaryTriple

    def target_for(self, task: str) -> str:
        field = "summary" if task == "sum" else task
        return getattr(self.targets, field)

    def to_record(self) -> dict:
        record = {
            "id": self.id,
            "utterances": [{"speaker": u.speaker, "text": u.text} for u in self.utterances],
        }
        if self.visual is not None:
            record["visual"] = list(self.visual)
        record["mcs"] = self.targets.mcs
        record["di"] = self.targets.di
        record["summary"] = self.targets.summary
        return record


# ---------------------------------------------------------------------------
# loading / saving
# ---------------------------------------------------------------------------

def _parse_record(obj, line_no: int, expected_d_vis: int | None) -> Dialogue:
    if not isinstance(obj, dict):
        raise SchemaError("record is not a JSON object", line=line_no)
    rid = obj.get("id")
    if not isinstance(rid, str) or not rid:
        raise SchemaError("missing or empty id", line=line_no, field="id")
    utts = obj.get("utterances")
    if not isinstance(utts, list):
        raise SchemaError("utterances missing or not a list", line=line_no, field="utterances")
    if len(utts) < 2:
        raise SchemaError(f"dialogue needs at least 2 utterances, found {len(utts)}",
                          line=line_no, field="utterances")
    parsed = []
    for k, u in enumerate(utts):
        fld = f"utterances[{k}]"
        if not isinstance(u, dict) or u.get("speaker") not in SPEAKERS:
            raise SchemaError("utterance must be an object with speaker 'patient' or 'doctor'",
                              line=line_no, field=fld)
        text = u.get("text")
        if not isinstance(text, str) or not normalize(text):
            raise SchemaError("utterance text missing or empty", line=line_no, field=fld + ".text")
        parsed.append(Utterance(speaker=u["speaker"], text=text))
    if parsed[0].speaker != "patient":
        raise SchemaError("first utterance must come from the patient",
                          line=line_no, field="utterances[0].speaker")

    visual = obj.get("visual")
    vis_tuple = None
    if visual is not None:
        if not isinstance(visual, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in visual):
            raise SchemaError("visual must be a list of numbers", line=line_no, field="visual")
        if any(not math.isfinite(float(v)) for v in visual):
            raise SchemaError("visual contains a non-finite entry", line=line_no, field="visual")
        if expected_d_vis is not None and len(visual) != expected_d_vis:
            raise SchemaError(
                f"visual has {len(visual)} entries, expected {expected_d_vis}",
                line=line_no, field="visual")
        vis_tuple = tuple(float(v) for v in visual)

    targets = {}
    for name in ("mcs", "di", "summary"):
        value = obj.get(name)
        if not isinstance(value, str) or not normalize(value):
            raise SchemaError(f"missing or empty target {name!r}", line=line_no, field=name)
        targets[name] = value
    return Dialogue(id=rid, utterances=tuple(parsed), visual=vis_tuple,
                    targets=SummaryTriple(**targets))


def load_dataset(path, expected_d_vis: int | None = None) -> list[Dialogue]:
    """Parse and validate a JSONL dataset, in file order.

    Rejected malformed-record classes (each reported with its line number):
      1. line is not valid JSON
      2. record is not a JSON object
      3. id missing, non-string, or empty
      4. duplicate id
      5. utterances missing or not a list
      6. fewer than two utterances
      7. first utterance not from the patient
      8. utterance not an object, or speaker outside {patient, doctor}
      9. utterance text missing, non-string, or empty after normalization
     10. visual present but not a list of numbers
     11. visual entry non-finite, or length differing from the expected dimension
     12. target mcs/di/summary missing, non-string, or empty

    Visual dimensions must agree across the file; pass expected_d_vis to pin
    them to a model config, otherwise the first record with a visual sets it.
    """
    dialogues: list[Dialogue] = []
    seen: dict[str, int] = {}
    d_vis = expected_d_vis
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", line=line_no) from exc
            dlg = _parse_record(obj, line_no, d_vis)
            if dlg.id in seen:
                raise SchemaError(f"duplicate id {dlg.id!r} (first seen on line {seen[dlg.id]})",
                                  line=line_no, field="id")
            seen[dlg.id] = line_no
            if d_vis is None and dlg.visual is not None:
                d_vis = len(dlg.visual)
            dialogues.append(dlg)
    return dialogues


def save_dataset(dialogues, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for dlg in dialogues:
            fh.write(json.dumps(dlg.to_record(), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

# Diagnosis groups partition the 20-symptom inventory; a record's diagnosis
# is the group of its primary (first-drawn) symptom, so a regeneration check
# can verify symptom->diagnosis consistency from the utterances alone.
DIAGNOSIS_GROUPS: dict[str, tuple[str, ...]] = {
    "influenza": ("fever", "chills", "fatigue"),
    "migraine": ("headache", "dizziness", "insomnia"),
    "gastritis": ("nausea", "vomiting", "heartburn"),
    "colitis": ("diarrhea", "cramping", "bloating"),
    "dermatitis": ("rash", "itching"),
    "bronchitis": ("cough", "wheezing"),
    "rhinitis": ("sneezing", "congestion"),
    "arrhythmia": ("palpitations", "sweating"),
}

SYMPTOMS: tuple[str, ...] = tuple(s for group in DIAGNOSIS_GROUPS.values() for s in group)
DIAGNOSES: tuple[str, ...] = tuple(DIAGNOSIS_GROUPS)

DIAGNOSIS_OF_SYMPTOM: dict[str, str] = {
    sym: diag for diag, group in DIAGNOSIS_GROUPS.items() for sym in group
}

ADVICE: dict[str, str] = {
    "influenza": "rest well and drink hot fluids",
    "migraine": "avoid bright screens and rest in a dark room",
    "gastritis": "eat small bland meals and avoid spicy food",
    "colitis": "stay hydrated and keep a food diary",
    "dermatitis": "apply a soothing moisturizer and avoid harsh soaps",
    "bronchitis": "use steam inhalation and avoid cold air",
    "rhinitis": "rinse with saline and limit dust exposure",
    "arrhythmia": "cut back on caffeine and schedule a cardiac review",
}

# Knowledge-base glosses are telegraphic on purpose: no function words and no
# word that any dialogue template or advice phrase uses, so retrieval scores
# are driven by the term tokens themselves rather than shared glue.
SYMPTOM_GLOSS: dict[str, str] = {
    "fever": "abnormally raised body temperature flushed skin",
    "chills": "shivering coldness sensation lacking external cause",
    "fatigue": "persistent exhaustion limiting normal activity",
    "headache": "aching pressure felt across skull temples",
    "dizziness": "spinning lightheaded feeling unsteady balance",
    "insomnia": "inability falling asleep remaining asleep overnight",
    "nausea": "queasy vomit urge centered upper stomach",
    "vomiting": "forceful stomach contents expulsion via mouth",
    "heartburn": "burning chest discomfort ascending behind breastbone",
    "diarrhea": "frequent loose watery bowel movements",
    "cramping": "sharp intermittent abdominal muscle contractions",
    "bloating": "swollen distended belly trapped digestive gas",
    "rash": "red irritated patches erupting skin surface",
    "itching": "prickling skin sensation provoking scratch impulse",
    "cough": "repeated reflex noisily clearing lungs",
    "wheezing": "high pitched whistling breathing sound",
    "sneezing": "sudden involuntary nasal spray burst",
    "congestion": "blocked stuffy nasal passages impeding airflow",
    "palpitations": "noticeable racing fluttering heartbeat sensations",
    "sweating": "excessive perspiration unrelated heat exertion",
}

DIAGNOSIS_GLOSS: dict[str, str] = {
    "influenza": "viral respiratory infection abrupt systemic onset",
    "migraine": "recurrent neurological disorder severe unilateral head pain",
    "gastritis": "protective stomach lining inflammation",
    "colitis": "large intestine inflammatory condition",
    "dermatitis": "skin inflammatory reaction against irritants",
    "bronchitis": "bronchial airway inflammation affecting lungs",
    "rhinitis": "nasal mucous membrane irritation swelling",
    "arrhythmia": "irregular electrical heart rhythm timing",
}

_P_OPEN = (
    "hello doctor , i have been dealing with {}",
    "hi doctor , for the last few days i have {}",
    "good morning doctor , i am here because of {}",
)
_P_ELAB = (
    "the {} is worst early in the day",
    "the {} keeps bothering me late at night",
    "the {} has been getting stronger since yesterday",
)
_D_FOLLOW = (
    "i see . how long has the {} been going on ?",
    "okay . does the {} come and go ?",
    "noted . when did the {} first start ?",
)
_D_FINAL = (
    "given the {} , this looks like {} . please {}",
    "considering the {} , my assessment is {} . please {}",
    "the {} together point to {} . please {}",
)


def _phrase(words) -> str:
    words = list(words)
    if len(words) == 1:
        return words[0]
    return " , ".join(words[:-1]) + " and " + words[-1]


def generate_synthetic(n: int, seed: int, d_vis: int = len(SYMPTOMS)):
    """Build n templated dialogues plus the matching knowledge base.

    Every uttered symptom appears several times across the exchange while the
    diagnosis is stated exactly once, the overall summary contains every mcs
    content word plus the di diagnosis word, and the visual vector carries a
    one-hot symptom block with sigma=0.1 Gaussian noise. Deterministic in
    (n, seed, d_vis).
    """
    if n < 1:
        raise ConfigError(f"need at least one record, got n={n}")
    if d_vis < len(SYMPTOMS):
        raise ConfigError(
            f"d_vis={d_vis} cannot hold the {len(SYMPTOMS)}-symptom indicator block")
    rng = np.random.default_rng(seed)
    dialogues = []
    for i in range(n):
        diagnosis = DIAGNOSES[int(rng.integers(len(DIAGNOSES)))]
        group = DIAGNOSIS_GROUPS[diagnosis]
        n_sym = int(rng.integers(1, len(group) + 1))
        symptoms = [group[j] for j in rng.permutation(len(group))[:n_sym]]

        utterances = [Utterance("patient", _pick(rng, _P_OPEN).format(_phrase(symptoms)))]
        for sym in symptoms:
            utterances.append(Utterance("doctor", _pick(rng, _D_FOLLOW).format(sym)))
            utterances.append(Utterance("patient", _pick(rng, _P_ELAB).format(sym)))
        utterances.append(Utterance(
            "doctor", _pick(rng, _D_FINAL).format(_phrase(symptoms), diagnosis, ADVICE[diagnosis])))

        mcs = f"patient reports {_phrase(symptoms)}"
        di = f"{diagnosis} suspected . advised to {ADVICE[diagnosis]}"
        summary = f"patient reports {_phrase(symptoms)} . doctor suspects {diagnosis}"

        visual = rng.normal(0.0, 0.1, size=d_vis)
        for sym in symptoms:
            visual[SYMPTOMS.index(sym)] += 1.0

        dialogues.append(Dialogue(
            id=f"dlg-{i:05d}",
            utterances=tuple(utterances),
            visual=tuple(float(v) for v in visual),
            targets=SummaryTriple(mcs=mcs, di=di, summary=summary),
        ))

    kb = [{"term": sym, "description": SYMPTOM_GLOSS[sym]} for sym in SYMPTOMS]
    kb += [{"term": diag, "description": DIAGNOSIS_GLOSS[diag]} for diag in DIAGNOSES]
    return dialogues, kb


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def uttered_symptoms(dialogue: Dialogue) -> list[str]:
    """Symptom inventory words appearing in the dialogue, in inventory order."""
    text = " ".join(normalize(u.text) for u in dialogue.utterances)
    words = set(text.split())
    return [s for s in SYMPTOMS if s in words]


def stated_diagnosis(dialogue: Dialogue) -> str | None:
    """The single diagnosis word uttered by the doctor, if any."""
    for u in dialogue.utterances:
        if u.speaker != "doctor":
            continue
        for word in normalize(u.text).split():
            if word in DIAGNOSES:
                return word
    return None
