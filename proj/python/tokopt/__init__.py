"""Token-space optimisation and editing for 1D image tokenizers."""

import json

try:
    from . import _tokopt
except ImportError:  # running from a build tree with the extension on sys.path
    import _tokopt

Tokenizer = _tokopt.Tokenizer
Scorer = _tokopt.Scorer
TokoptError = _tokopt.TokoptError
replace_tokens = _tokopt.replace_tokens
copy_paste_edit = _tokopt.copy_paste_edit
preset_positions = _tokopt.preset_positions
importance_profile = _tokopt.importance_profile
fid = _tokopt.fid
inception_score = _tokopt.inception_score
encode_png = _tokopt.encode_png
decode_png = _tokopt.decode_png


def _dump(doc):
    return "" if doc is None else json.dumps(doc)


def toy_tokenizer(seed=0, codebook_size=None):
    cfg = {"kind": "toy-tokenizer", "seed": seed}
    if codebook_size is not None:
        cfg["codebook_size"] = codebook_size
    return Tokenizer(json.dumps(cfg))


def toy_scorer(seed=0, prompts=None):
    cfg = {"kind": "toy-scorer", "seed": seed}
    if prompts:
        cfg["prompts"] = {k: list(map(float, v)) for k, v in prompts.items()}
    return Scorer(json.dumps(cfg))


def optimizer_config(preset="text-edit", **overrides):
    """Preset as a dict with kebab-case keys; keyword overrides use underscores."""
    doc = json.loads(_tokopt.optimizer_config(preset))
    for key, value in overrides.items():
        doc[key.replace("_", "-")] = value
    return doc


def optimize(tokenizer, scorer, prompt, seed_image=None, config=None, crops=8):
    result = _tokopt.optimize(tokenizer, scorer, seed_image, prompt, _dump(config), crops)
    result["trajectory"] = json.loads(result["trajectory"])
    return result


def inpaint(tokenizer, image, mask, blur_radius=2.0, config=None):
    result = _tokopt.inpaint(tokenizer, image, mask, blur_radius, _dump(config))
    result["trajectory"] = json.loads(result["trajectory"])
    return result


def run_evaluation(config=None):
    return json.loads(_tokopt.run_evaluation(_dump(config)))
