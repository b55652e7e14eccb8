# Copyright 2026 The ratcap Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Retrieval-augmented transformer image captioning."""

import json

from . import _ratcap
from ._ratcap import (
    Captioner,
    ConfigError,
    CorpusError,
    HnswIndex,
    Tokenizer,
    bleu,
    normalize_text,
    rouge_l,
    run_cli,
    version,
)

__all__ = [
    "Captioner",
    "ConfigError",
    "CorpusError",
    "HnswIndex",
    "Tokenizer",
    "bleu",
    "corpus_eval",
    "model_config",
    "normalize_text",
    "rouge_l",
    "run",
    "run_cli",
    "version",
]


def corpus_eval(predictions, references):
    """BLEU-1..4, ROUGE-L and CIDEr-D over {image_id: caption} and
    {image_id: [references]}."""
    return json.loads(_ratcap._corpus_eval_json(predictions, references))


def model_config(captioner):
    return json.loads(captioner._config_json())


def run(*args):
    """Runs a CLI command. Returns the parsed JSON output when there is one,
    else the text; raises RuntimeError with the error record on failure."""
    code, out, err = run_cli([str(a) for a in args])
    if code != 0:
        raise RuntimeError(json.loads(err) if err.strip().startswith("{") else err)
    try:
        return json.loads(out)
    except ValueError:
        return out

