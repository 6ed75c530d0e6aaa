"""Caption pyramids: positional image splitting, captioning, and merging.

An image is split into four quadrant patches that tile it exactly (odd
dimensions give the extra pixel to the right/bottom patches).  Each
patch and the whole image get captions from a captioner backend; a chat
backend then merges the four local captions with the global one.  With
depth greater than one the recursion runs bottom-up: each patch's merged
caption serves as the local caption in its parent's merge.

Patches are materialized as lossless PNG crops; no resampling happens
on this side of the wire.
"""

from __future__ import annotations

import enum
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from PIL import Image

from poca.backends import BackendError, ChatMessage, Client
from poca.prompts import MERGE_SLOTS, MergePromptTemplate

__all__ = [
    "Position",
    "ImageRef",
    "Patch",
    "CaptionNode",
    "PyramidNode",
    "CaptionPyramid",
    "ManifestItem",
    "PipelineSettings",
    "PipelineRun",
    "CAPTION_PROMPTS",
    "split_image",
    "crop_bytes",
    "caption",
    "render_merge_prompt",
    "merge_captions",
    "concat_baseline",
    "build_pyramid",
    "read_manifest",
    "run_pipeline",
]

#: The two captioning instructions, verbatim.
CAPTION_PROMPTS = {
    "short": "Provide a one-sentence caption for the provided image",
    "detailed": "Describe this image in detail",
}


class Position(enum.Enum):
    TOP_LEFT = "top_left"
    TOP_RIGHT = "top_right"
    BOTTOM_LEFT = "bottom_left"
    BOTTOM_RIGHT = "bottom_right"

    @property
    def short(self) -> str:
        return {"top_left": "tl", "top_right": "tr", "bottom_left": "bl",
                "bottom_right": "br"}[self.value]

    @property
    def marker(self) -> str:
        return self.value.replace("_", "-").capitalize()


@dataclass(frozen=True)
class ImageRef:
    """A source image: id, pixel size, and where its bytes live."""

    id: str
    width: int
    height: int
    path: Path | None = None
    data: bytes | None = None

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError(
                f"image {self.id!r} must be at least 2x2, "
                f"got {self.width}x{self.height}"
            )
        if self.path is None and self.data is None:
            raise ValueError(f"image {self.id!r} needs a path or byte payload")
        if self.path is not None:
            object.__setattr__(self, "path", Path(self.path))

    @classmethod
    def from_file(cls, image_id: str, path: str | Path) -> "ImageRef":
        with Image.open(path) as img:
            width, height = img.size
        return cls(id=image_id, width=width, height=height, path=Path(path))

    def load_bytes(self) -> bytes:
        if self.data is not None:
            return self.data
        return self.path.read_bytes()


@dataclass(frozen=True)
class Patch:
    """A rectangular region of the root image, in absolute pixels."""

    image: ImageRef
    parent: str
    origin_x: int
    origin_y: int
    width: int
    height: int
    position: Position
    depth: int

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("patch depth starts at 1")
        if self.width < 1 or self.height < 1:
            raise ValueError("patch must be at least 1x1")
        if self.origin_x < 0 or self.origin_y < 0:
            raise ValueError("patch origin must be non-negative")
        if (
            self.origin_x + self.width > self.image.width
            or self.origin_y + self.height > self.image.height
        ):
            raise ValueError(f"patch {self.id} exceeds the image bounds")

    @property
    def id(self) -> str:
        return f"{self.parent}/{self.position.value}"


def split_image(target: ImageRef | Patch) -> tuple[Patch, Patch, Patch, Patch]:
    """Split a target into four quadrant patches that tile it exactly.

    Left/top quadrants take the floor halves; right/bottom take the
    remainder, so odd dimensions stay within one pixel of equal.
    """
    if isinstance(target, Patch):
        image, parent = target.image, target.id
        x0, y0 = target.origin_x, target.origin_y
        w, h = target.width, target.height
        depth = target.depth + 1
    else:
        image, parent = target, target.id
        x0, y0 = 0, 0
        w, h = target.width, target.height
        depth = 1
    if w < 2 or h < 2:
        raise ValueError(f"cannot split {parent!r}: {w}x{h} is below 2x2")
    lw, th = w // 2, h // 2
    rw, bh = w - lw, h - th

    def make(px, py, pw, ph, pos):
        return Patch(
            image=image, parent=parent, origin_x=px, origin_y=py,
            width=pw, height=ph, position=pos, depth=depth,
        )

    return (
        make(x0, y0, lw, th, Position.TOP_LEFT),
        make(x0 + lw, y0, rw, th, Position.TOP_RIGHT),
        make(x0, y0 + th, lw, bh, Position.BOTTOM_LEFT),
        make(x0 + lw, y0 + th, rw, bh, Position.BOTTOM_RIGHT),
    )


def crop_bytes(target: ImageRef | Patch) -> bytes:
    """PNG bytes for a target; patches are lossless crops of the root image."""
    if isinstance(target, ImageRef):
        return target.load_bytes()
    with Image.open(io.BytesIO(target.image.load_bytes())) as img:
        box = (
            target.origin_x,
            target.origin_y,
            target.origin_x + target.width,
            target.origin_y + target.height,
        )
        out = io.BytesIO()
        img.crop(box).save(out, format="PNG")
        return out.getvalue()


@dataclass(frozen=True)
class CaptionNode:
    """One caption with its provenance; word count is whitespace tokens."""

    text: str
    scope: str
    depth: int
    model_id: str
    prompt_kind: str
    word_count: int = field(init=False)

    def __post_init__(self):
        if not self.text:
            raise ValueError("caption text must be non-empty")
        object.__setattr__(self, "word_count", len(self.text.split()))

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "scope": self.scope,
            "depth": self.depth,
            "model_id": self.model_id,
            "prompt_kind": self.prompt_kind,
            "word_count": self.word_count,
        }


def caption(
    target: ImageRef | Patch,
    backend: Client,
    kind: str = "short",
    loader=crop_bytes,
) -> CaptionNode:
    """Caption a target with one of the two fixed instructions."""
    if kind not in CAPTION_PROMPTS:
        raise ValueError(f"kind must be one of {sorted(CAPTION_PROMPTS)}, got {kind!r}")
    completion = backend.caption_image(loader(target), CAPTION_PROMPTS[kind])
    if isinstance(target, Patch):
        scope, depth = target.position.value, target.depth
    else:
        scope, depth = "global", 0
    return CaptionNode(
        text=completion.text,
        scope=scope,
        depth=depth,
        model_id=backend.cfg.model_id,
        prompt_kind=kind,
    )


def _locals_by_slot(local_nodes: Sequence[CaptionNode]) -> dict[str, str]:
    if len(local_nodes) != 4:
        raise ValueError(f"expected exactly 4 local captions, got {len(local_nodes)}")
    by_slot = {node.scope: node.text for node in local_nodes}
    missing = [s for s in MERGE_SLOTS[1:] if s not in by_slot]
    if missing:
        raise ValueError(f"missing local captions for positions: {missing}")
    return by_slot


def render_merge_prompt(
    global_node: CaptionNode,
    local_nodes: Sequence[CaptionNode],
    template: MergePromptTemplate,
) -> list[ChatMessage]:
    """Messages for one merge: system, filled user section, generation prefix."""
    captions = {"global": global_node.text, **_locals_by_slot(local_nodes)}
    return [
        ChatMessage("system", template.system),
        ChatMessage("user", template.render_user(captions)),
        ChatMessage("assistant", template.assistant_prefix),
    ]


def merge_captions(
    global_node: CaptionNode,
    local_nodes: Sequence[CaptionNode],
    merger: Client,
    template: MergePromptTemplate,
) -> CaptionNode:
    """Merge four positional captions with the global one via a chat model."""
    messages = render_merge_prompt(global_node, local_nodes, template)
    completion = merger.chat_complete(
        messages[:-1], assistant_prefix=template.assistant_prefix
    )
    # the merged caption describes the same region the "global" input did,
    # so an inner patch's merged caption keeps that patch's position scope
    return CaptionNode(
        text=completion.text,
        scope=global_node.scope,
        depth=global_node.depth,
        model_id=merger.cfg.model_id,
        prompt_kind=global_node.prompt_kind,
    )


#: Baseline sections follow the merge prompt's patch order.
_BASELINE_ORDER = (
    Position.TOP_LEFT,
    Position.BOTTOM_LEFT,
    Position.TOP_RIGHT,
    Position.BOTTOM_RIGHT,
)


def concat_baseline(
    global_node: CaptionNode | None, local_nodes: Sequence[CaptionNode]
) -> CaptionNode:
    """Parameter-free merge baseline: concatenation with positional markers.

    Equivalent to giving the global caption no weight in the blend when
    it is omitted; no backend call is made either way.
    """
    by_slot = _locals_by_slot(local_nodes)
    parts = [] if global_node is None else [global_node.text]
    parts += [f"{pos.marker}: {by_slot[pos.value]}" for pos in _BASELINE_ORDER]
    sample = local_nodes[0]
    return CaptionNode(
        text="\n".join(parts),
        scope="global",
        depth=0 if global_node is None else global_node.depth,
        model_id="concat",
        prompt_kind=sample.prompt_kind,
    )


@dataclass(frozen=True)
class PyramidNode:
    """One pyramid level: a caption, children, and the merged result."""

    target_id: str
    caption: CaptionNode
    children: tuple["PyramidNode", ...] = ()
    merged: CaptionNode | None = None

    def __post_init__(self):
        if self.children and len(self.children) != 4:
            raise ValueError("internal pyramid nodes have exactly 4 children")
        if self.merged is not None and not self.children:
            raise ValueError("leaf nodes cannot carry a merged caption")

    @property
    def final(self) -> CaptionNode:
        """The caption this node contributes upward."""
        return self.merged if self.merged is not None else self.caption

    def to_dict(self) -> dict:
        out = {"target": self.target_id, "caption": self.caption.to_dict()}
        if self.children:
            out["children"] = [c.to_dict() for c in self.children]
            out["merged"] = self.merged.to_dict()
        return out


@dataclass(frozen=True)
class CaptionPyramid:
    root: PyramidNode
    depth: int

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("pyramid depth must be >= 1")


def build_pyramid(
    img: ImageRef,
    depth: int,
    captioner: Client,
    merger: Client,
    template: MergePromptTemplate,
    kind: str = "short",
    loader=crop_bytes,
) -> CaptionPyramid:
    """Caption an image hierarchically and merge bottom-up.

    A depth-d pyramid issues sum(4^k, k=0..d) caption calls and
    sum(4^k, k=0..d-1) merge calls.
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")

    def build(target, levels: int) -> PyramidNode:
        node_caption = caption(target, captioner, kind, loader=loader)
        target_id = target.id
        if levels == 0:
            return PyramidNode(target_id=target_id, caption=node_caption)
        children = tuple(build(p, levels - 1) for p in split_image(target))
        merged = merge_captions(
            node_caption, [c.final for c in children], merger, template
        )
        return PyramidNode(
            target_id=target_id,
            caption=node_caption,
            children=children,
            merged=merged,
        )

    return CaptionPyramid(root=build(img, depth), depth=depth)


# -- batch runs --------------------------------------------------------------

_MANIFEST_KEYS = {"id", "path", "questions", "reference_captions"}


@dataclass(frozen=True)
class ManifestItem:
    id: str
    path: str
    questions: tuple[str, ...] = ()
    reference_captions: tuple[str, ...] = ()


def read_manifest(path: str | Path) -> list[ManifestItem]:
    """Read a JSONL manifest; ids must be unique, unknown keys rejected."""
    items: list[ManifestItem] = []
    seen: set[str] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        unknown = set(obj) - _MANIFEST_KEYS
        if unknown:
            raise ValueError(
                f"{path}:{lineno}: unknown manifest keys {sorted(unknown)}"
            )
        if "id" not in obj or "path" not in obj:
            raise ValueError(f"{path}:{lineno}: manifest rows need 'id' and 'path'")
        if obj["id"] in seen:
            raise ValueError(f"{path}:{lineno}: duplicate image id {obj['id']!r}")
        seen.add(obj["id"])
        items.append(
            ManifestItem(
                id=obj["id"],
                path=obj["path"],
                questions=tuple(obj.get("questions", ())),
                reference_captions=tuple(obj.get("reference_captions", ())),
            )
        )
    return items


@dataclass(frozen=True)
class PipelineSettings:
    """Knobs for one batch run."""

    depth: int = 1
    template: MergePromptTemplate | None = None
    prompt_kind: str = "short"
    baselines: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.prompt_kind not in CAPTION_PROMPTS:
            raise ValueError(f"prompt_kind must be one of {sorted(CAPTION_PROMPTS)}")


@dataclass
class PipelineRun:
    records: list[dict]
    failures: int

    @property
    def ok(self) -> bool:
        return self.failures == 0


def _caption_calls(depth: int) -> int:
    return sum(4**k for k in range(depth + 1))


def _merge_calls(depth: int) -> int:
    return sum(4**k for k in range(depth))


def _record_for(item: ManifestItem, pyramid: CaptionPyramid, settings) -> dict:
    root = pyramid.root
    locals_by_short = {}
    for child in root.children:
        short = Position(child.target_id.rsplit("/", 1)[-1]).short
        locals_by_short[short] = child.final.to_dict()
    record = {
        "id": item.id,
        "depth": pyramid.depth,
        "global": root.caption.to_dict(),
        "locals": locals_by_short,
        "merged": root.merged.to_dict(),
        "timing": {
            "caption_calls": _caption_calls(pyramid.depth),
            "merge_calls": _merge_calls(pyramid.depth),
        },
        "errors": [],
    }
    if settings.baselines:
        local_nodes = [c.final for c in root.children]
        record["baselines"] = {
            "local_concat": concat_baseline(None, local_nodes).to_dict(),
            "global_local_concat": concat_baseline(root.caption, local_nodes).to_dict(),
        }
    if pyramid.depth > 1:
        record["pyramid"] = root.to_dict()
    return record


def run_pipeline(
    items: Sequence[ManifestItem],
    captioner: Client,
    merger: Client,
    settings: PipelineSettings,
    records_path: str | Path | None = None,
    loader=crop_bytes,
) -> PipelineRun:
    """Process every manifest item; per-item failures do not abort the run.

    Items may be processed concurrently up to ``settings.workers``, but
    records are always emitted in manifest order, and each record is
    persisted as soon as it (and all its predecessors) completed.
    """
    template = settings.template
    if template is None:
        from poca.prompts import DEFAULT_MERGE_TEMPLATE

        template = DEFAULT_MERGE_TEMPLATE

    def process(item: ManifestItem) -> dict:
        try:
            img = ImageRef.from_file(item.id, item.path)
            pyramid = build_pyramid(
                img,
                settings.depth,
                captioner,
                merger,
                template,
                kind=settings.prompt_kind,
                loader=loader,
            )
            return _record_for(item, pyramid, settings)
        except (BackendError, OSError, ValueError) as exc:
            return {"id": item.id, "errors": [f"{type(exc).__name__}: {exc}"]}

    records: list[dict] = []
    failures = 0
    sink = None
    try:
        if records_path is not None:
            sink = Path(records_path).open("w", encoding="utf-8")
        if settings.workers > 1 and len(items) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=settings.workers) as pool:
                produced = pool.map(process, items)
                for record in produced:
                    records.append(record)
                    failures += bool(record["errors"])
                    if sink:
                        sink.write(json.dumps(record) + "\n")
                        sink.flush()
        else:
            for item in items:
                record = process(item)
                records.append(record)
                failures += bool(record["errors"])
                if sink:
                    sink.write(json.dumps(record) + "\n")
                    sink.flush()
    finally:
        if sink:
            sink.close()
    return PipelineRun(records=records, failures=failures)
