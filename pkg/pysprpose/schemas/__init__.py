"""
JSON Schema documents for the files this package reads and writes.

    pose_dataset.json   pose dataset files (ground truth and predictions)
    bench_report.json   decode scaling study reports
"""
import json
import os
from functools import lru_cache

import jsonschema

HERE = os.path.abspath(os.path.dirname(__file__))


@lru_cache(maxsize=None)
def load_schema(name):
    with open(os.path.join(HERE, name + ".json"), "r", encoding="utf-8") as fh:
        return json.load(fh)


def field_path(root, path):
    """Render a jsonschema error path as root.images[0].width."""
    out = root
    for part in path:
        out += "[{0}]".format(part) if isinstance(part, int) else ".{0}".format(part)
    return out


def check_document(doc, name, root, error_cls):
    """
    Validate doc against the named schema.
    :raises error_cls: "<field path>: <reason>" for the most relevant violation
    """
    try:
        jsonschema.validate(instance=doc, schema=load_schema(name))
    except jsonschema.ValidationError as e:
        raise error_cls("{0}: {1}".format(field_path(root, e.absolute_path), e.message))
    return doc
