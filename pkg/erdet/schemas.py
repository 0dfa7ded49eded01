import json
import logging
from pathlib import Path

import jsonschema
import jsonschema.exceptions

_NUMBER_OR_NULL = {"type": ["number", "null"]}
_AP = {"type": "number", "minimum": 0.0, "maximum": 1.0}
_AP_OR_NULL = {"type": ["number", "null"], "minimum": 0.0, "maximum": 1.0}


def generate_schema(
    properties: dict = None, required: list = None, additional: bool = True
) -> dict:
    """Generates a JSON schema with 'type", 'required' and 'properties' fields"""

    if properties is None:
        properties = {}
    if required is None:
        required = []
    schema = {
        "type": "object",
        "properties": properties,
        "required": required,
    }
    if not additional:
        schema["additionalProperties"] = False
    return schema


def generate_metrics_schema() -> dict:
    """Schema of the metrics.json document written after every protocol step."""
    selection_branch = generate_schema(
        properties={
            "images": {"type": "integer", "minimum": 0},
            "mean": _NUMBER_OR_NULL,
            "min": _NUMBER_OR_NULL,
            "max": _NUMBER_OR_NULL,
        },
        required=["images", "mean", "min", "max"],
    )
    properties = {
        "step": {"type": "integer", "minimum": 0},
        "strategy": {"type": "string"},
        "mAP": _AP,
        "ap50": _AP,
        "ap75": _AP,
        "per_class_ap": {"type": "object", "additionalProperties": _AP},
        "base_ap": _AP_OR_NULL,
        "new_ap": _AP_OR_NULL,
        "base_categories": {"type": "array", "items": {"type": "integer"}},
        "new_categories": {"type": "array", "items": {"type": "integer"}},
        "num_detections": {"type": "integer", "minimum": 0},
        "num_ground_truths": {"type": "integer", "minimum": 0},
        "num_images": {"type": "integer", "minimum": 0},
        "selection": generate_schema(
            properties={"cls": selection_branch, "reg": selection_branch},
            required=["cls", "reg"],
        ),
    }
    required = ["mAP", "ap50", "ap75", "per_class_ap", "base_ap", "new_ap", "num_detections"]
    return generate_schema(properties=properties, required=required)


def generate_config_schema() -> dict:
    """
    Schema of experiment config files. Every section is optional: missing keys take the
    dataclass defaults. Unknown keys are rejected so that typos do not silently fall back to a
    default.
    """
    positive_int = {"type": "integer", "minimum": 1}
    non_negative = {"type": "number", "minimum": 0}
    scene = generate_schema(
        properties={
            "image_size": positive_int,
            "num_categories": positive_int,
            "objects_per_image": {
                "type": "array",
                "items": positive_int,
                "minItems": 2,
                "maxItems": 2,
            },
            "min_box_side": positive_int,
            "max_overlap_iou": non_negative,
            "seed": {"type": "integer"},
        },
        additional=False,
    )
    head = generate_schema(
        properties={
            "num_bins": positive_int,
            "pyramid_strides": {"type": "array", "items": positive_int, "minItems": 1},
            "channels": positive_int,
        },
        additional=False,
    )
    protocol = generate_schema(
        properties={
            "name": {"enum": ["one_step", "two_step", "four_step", "reversed"]},
            "base_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "steps": {
                "type": "array",
                "items": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
        },
        additional=False,
    )
    train = generate_schema(
        properties={
            "epochs_per_step": positive_int,
            "batch_size": positive_int,
            "base_lr": {"type": "number", "exclusiveMinimum": 0},
            "incremental_lr_scale": {"type": "number", "exclusiveMinimum": 0},
            "lr_decay_epochs": {"type": "array", "items": positive_int},
            "lr_decay_factor": {"type": "number", "exclusiveMinimum": 0},
            "momentum": non_negative,
            "weight_decay": non_negative,
            "grad_clip_norm": {"type": ["number", "null"]},
            "strategy": {"type": "string"},
            "topk": {"type": ["integer", "null"], "minimum": 1},
            "hflip": {"type": "boolean"},
            "deterministic": {"type": "boolean"},
            "num_train_images": positive_int,
            "num_test_images": positive_int,
            "eval_score_threshold": non_negative,
            "eval_nms_iou": non_negative,
            "warmup_iters": {"type": "integer", "minimum": 0},
            "selection_dump_images": {"type": "integer", "minimum": 0},
            "device": {"type": "string"},
        },
        additional=False,
    )
    distill = generate_schema(
        properties={
            "alpha_cls": non_negative,
            "alpha_reg": non_negative,
            "lambda_cls": non_negative,
            "lambda_reg": non_negative,
            "lambda_feat": non_negative,
            "temperature": {"type": "number", "exclusiveMinimum": 0},
            "nms_iou_ers": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "per_level_stats": {"type": "boolean"},
            "use_kl_localization": {"type": "boolean"},
            "normalize_distill": {"type": "boolean"},
            "box_confidence": {"enum": ["mean", "min"]},
            "cls_on_softened": {"type": "boolean"},
            "feature_selection": {"enum": ["all", "ers"]},
            "cache_teacher": {"type": "boolean"},
        },
        additional=False,
    )
    properties = {
        "name": {"type": "string"},
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "data_dir": {"type": ["string", "null"]},
        "scene": scene,
        "head": head,
        "protocol": protocol,
        "train": train,
        "distill": distill,
    }
    return generate_schema(properties=properties, additional=False)


def validate(document: dict, schema: dict) -> dict:
    """Checks a document against a schema, logging the failure before re-raising it."""
    try:
        jsonschema.validate(document, schema)
    except jsonschema.exceptions.ValidationError as e:
        logging.error(f"Validation failed: {e.message}")
        raise
    return document


def load_json(path: Path | str, schema: dict = None) -> dict:
    """Reads a JSON file. Checks against a schema if one is provided"""
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if schema:
        validate(data, schema)
    return data


def dump_json(document: dict, schema: dict = None) -> str:
    """
    Serializes a document with sorted keys and a trailing newline so that identical documents
    always produce identical bytes.
    """
    if schema:
        validate(document, schema)
    return json.dumps(document, indent=2, sort_keys=True) + "\n"
