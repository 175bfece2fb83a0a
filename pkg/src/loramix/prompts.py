"""Access to the versioned prompt template assets.

The generation and evaluation templates under assets/ are treated as
frozen wire text: code fills their placeholders but never edits them.
The consistency (faith) and distractor-filtering templates are this
package's own; the upstream metric definitions leave those prompts open.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    path = resources.files("loramix").joinpath(f"assets/{name}.txt")
    return path.read_text(encoding="utf-8")


def question_prompt(context: str) -> str:
    return load_template("question").format(context=context)


def ground_truth_prompt(context: str, question: str) -> str:
    return load_template("ground_truth").format(context=context,
                                                question=question)


def open_book_prompt(context: str, question: str) -> str:
    return load_template("open_book").format(context=context,
                                             question=question)


def closed_book_prompt(question: str) -> str:
    return load_template("closed_book").format(question=question)


def fluency_prompt(response: str) -> str:
    return load_template("fluency").format(response=response)


def faith_prompt(context: str, response: str) -> str:
    return load_template("faith").format(context=context, response=response)


def filter_prompt(context: str, distractors: str, response: str) -> str:
    return load_template("filter").format(context=context,
                                          distractors=distractors,
                                          response=response)
