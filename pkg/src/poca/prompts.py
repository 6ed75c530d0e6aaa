"""Prompt templates for caption merging and caption-based QA.

The default texts are fixed verbatim (including the original typos
"explaination" and "plese") and are golden-file tested, so do not edit
them casually.  Two merge templates ship: ``corrected``, whose user
section labels the fourth patch "Bottom-right", and ``paper-verbatim``,
which repeats the "Bottom-left" label for the fourth patch exactly as
originally printed (the fourth caption is still the bottom-right one).

Templates serialize to a sectioned plain-text format::

    === system ===
    ...
    === user ===
    ...
    === assistant_prefix ===
    ...

so they can be exported, edited, and loaded back.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass

__all__ = [
    "MergePromptTemplate",
    "DEFAULT_MERGE_TEMPLATE",
    "MERGE_TEMPLATES",
    "MERGE_SLOTS",
    "VQA_SYSTEM",
    "VQA_USER_TEMPLATE",
    "VQA_ASSISTANT_PREFIX",
    "NO_CAPTION_SYSTEM",
    "NO_CAPTION_USER_TEMPLATE",
    "NLI_SYSTEM",
    "NLI_USER_TEMPLATE",
    "format_transcript",
]

MERGE_SLOTS = ("global", "top_left", "bottom_left", "top_right", "bottom_right")

_MERGE_SYSTEM = """\
**Input**:
- You will receive a **global caption** describing an image.
- Additionally, you will have access to **local captions** generated for specific patches within the image.
- Both global and local captions may contain noise or errors.

**Task Objective**:
- Your goal is to create a **merged global caption** that combines relevant information from both sources.
- The merged caption should be **no longer than the original ones**.
- You only give the merged caption as output, **without any additional information**.
- Do NOT give any explaination or notes on how you generate this caption.

**Guidelines**:
- **Combine Information**: Extract key details from both global and local captions.
- **Filter Noise**: Remove non-sense content, inaccuracies, and irrelevant information.
- **Prioritize Visual Details**: Highlight essential visual elements instead of feeling or atmosphere
- **Be Concise**: Use as few words as possible while maintaining coherence and clarity.
- **Ensure Coherence**: Arrange the merged information logically.

Remember, your output should be a high-quality caption that is concise, informative, and coherent!"""

_MERGE_USER_CORRECTED = """\
### Global Caption: {global}
### Top-left: {top_left}
### Bottom-left: {bottom_left}
### Top-right: {top_right}
### Bottom-right: {bottom_right}"""

# The originally printed user section labels the fourth patch
# "Bottom-left" a second time; the slot there is still the bottom-right
# caption so all four patches are represented.
_MERGE_USER_PAPER_VERBATIM = """\
### Global Caption: {global}
### Top-left: {top_left}
### Bottom-left: {bottom_left}
### Top-right: {top_right}
### Bottom-left: {bottom_right}"""

MERGE_ASSISTANT_PREFIX = "Here's the merged caption:"

VQA_SYSTEM = (
    "You will be given a caption of an image, and your task is to try to answer "
    "the question based on the caption. If the relevant information is not "
    "present in the caption, try your best to guess the answer. You shouldn't "
    "provide any rationale or explaination in your response, just give the "
    "answer only. The answer can be a number, a single word or a short phrase, "
    "plese make your response as short, simple and clear as possible."
)
VQA_USER_TEMPLATE = "Image Caption: {caption}\nQuestion: {question}"
VQA_ASSISTANT_PREFIX = "The most possible answer is:"

NO_CAPTION_SYSTEM = (
    "You will be given a question regarding an image, and your task is to try "
    "to infer the most possible answer"
)
NO_CAPTION_USER_TEMPLATE = "Question: {question}"

NLI_SYSTEM = (
    "You are a natural language inference classifier. Given a premise and a "
    "hypothesis, classify their relationship as entailment, neutral, or "
    "contradiction. Respond with a single word."
)
NLI_USER_TEMPLATE = "Premise: {premise}\nHypothesis: {hypothesis}"


def _slot_counts(template: str) -> dict[str, int]:
    counts: dict[str, int] = {}
    for _, name, _, _ in string.Formatter().parse(template):
        if name is not None:
            counts[name] = counts.get(name, 0) + 1
    return counts


@dataclass(frozen=True)
class MergePromptTemplate:
    """Merge instruction with a five-slot user section.

    The user template must contain each of the slots {global},
    {top_left}, {bottom_left}, {top_right}, {bottom_right} exactly once.
    """

    system: str
    user_template: str
    assistant_prefix: str

    def __post_init__(self):
        counts = _slot_counts(self.user_template)
        for slot in MERGE_SLOTS:
            if counts.get(slot, 0) != 1:
                raise ValueError(
                    f"user template must contain {{{slot}}} exactly once, "
                    f"found {counts.get(slot, 0)}"
                )
        unknown = set(counts) - set(MERGE_SLOTS)
        if unknown:
            raise ValueError(f"unknown slots in user template: {sorted(unknown)}")

    def render_user(self, captions: dict[str, str]) -> str:
        missing = [s for s in MERGE_SLOTS if s not in captions]
        if missing:
            raise ValueError(f"missing captions for slots: {missing}")
        return self.user_template.format(**{s: captions[s] for s in MERGE_SLOTS})

    def serialize(self) -> str:
        return (
            f"=== system ===\n{self.system}\n"
            f"=== user ===\n{self.user_template}\n"
            f"=== assistant_prefix ===\n{self.assistant_prefix}\n"
        )

    @classmethod
    def parse(cls, text: str) -> "MergePromptTemplate":
        sections = _parse_sections(text)
        missing = {"system", "user", "assistant_prefix"} - set(sections)
        if missing:
            raise ValueError(f"template file missing sections: {sorted(missing)}")
        return cls(
            system=sections["system"],
            user_template=sections["user"],
            assistant_prefix=sections["assistant_prefix"],
        )


_SECTION_RE = re.compile(r"^=== (\w+) ===$")


def _parse_sections(text: str) -> dict[str, str]:
    sections: dict[str, str] = {}
    name = None
    lines: list[str] = []
    for line in text.splitlines():
        m = _SECTION_RE.match(line)
        if m:
            if name is not None:
                sections[name] = "\n".join(lines)
            name = m.group(1)
            lines = []
        elif name is not None:
            lines.append(line)
    if name is not None:
        sections[name] = "\n".join(lines)
    return sections


MERGE_TEMPLATES = {
    "corrected": MergePromptTemplate(
        system=_MERGE_SYSTEM,
        user_template=_MERGE_USER_CORRECTED,
        assistant_prefix=MERGE_ASSISTANT_PREFIX,
    ),
    "paper-verbatim": MergePromptTemplate(
        system=_MERGE_SYSTEM,
        user_template=_MERGE_USER_PAPER_VERBATIM,
        assistant_prefix=MERGE_ASSISTANT_PREFIX,
    ),
    # ablation variant: the whole instruction collapses to three words
    "naive": MergePromptTemplate(
        system="merge these captions",
        user_template=_MERGE_USER_CORRECTED,
        assistant_prefix=MERGE_ASSISTANT_PREFIX,
    ),
}

DEFAULT_MERGE_TEMPLATE = MERGE_TEMPLATES["corrected"]


def format_transcript(messages) -> str:
    """Readable role-tagged rendering of a message list (golden-file format)."""
    return "\n\n".join(f"[{m.role}]\n{m.content}" for m in messages) + "\n"
