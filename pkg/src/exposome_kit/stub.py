"""Deterministic rule-based stand-in for a chat-completion endpoint.

Replies depend only on the original system and user messages, never on call
order, so concurrent or permuted runs see identical answers.  Rules:

* extraction: each ``FINDING: phrase | outcome | direction`` line in the
  article becomes one finding; ``STUB-INVALID`` yields a reply with no JSON.
* condensation: the last two words of the phrase; phrases containing
  ``nonresponse`` get a refusal.
* clustering: labels grouped by their final word (after a small synonym
  table); labels containing ``orphan`` are left out of the reply.
* rating: green-like features score the share of green pixels, everything
  else a hash of (model, feature, image).
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import re

import httpx
import numpy as np
from PIL import Image

SYNONYMS = {"woodland": "forest", "woods": "forest", "trees": "tree", "greenery": "green"}
GREEN_WORDS = ("green", "nature", "natural", "plant", "tree", "vegetation", "forest", "park")

_FINDING = re.compile(r"^\s*FINDING:\s*(.+?)\s*\|\s*(.+?)\s*\|\s*(.+?)\s*$", re.M)
_RATE = re.compile(r"for (.+?) on a scale from (\d+)\b.*? to (\d+)\b")


def _h(*parts: str) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(parts).encode()).digest()[:8], "big")


def _text_and_image(content) -> tuple[str, bytes | None]:
    if isinstance(content, str):
        return content, None
    text, image = "", None
    for part in content:
        if part.get("type") == "text":
            text += part["text"]
        elif part.get("type") == "image_url":
            url = part["image_url"]["url"]
            image = base64.b64decode(url.split(",", 1)[1])
    return text, image


def green_fraction(image: bytes) -> float:
    with Image.open(io.BytesIO(image)) as im:
        px = np.asarray(im.convert("RGB").resize((32, 32), Image.Resampling.BOX), dtype=int)
    r, g, b = px[..., 0], px[..., 1], px[..., 2]
    return float(np.mean((g > r) & (g > b)))


def _extract(user: str) -> str:
    if "STUB-INVALID" in user:
        return "I could not find any structured findings in this article."
    findings = [
        {"context_phrase": p, "outcome": o, "direction": d, "evidence": m.group(0).strip()}
        for m in _FINDING.finditer(user)
        for p, o, d in [m.groups()]
    ]
    return "```json\n" + json.dumps({"findings": findings}) + "\n```"


def _condense(user: str) -> str:
    phrase = user.split("Phrase:", 1)[-1].strip()
    if "nonresponse" in phrase:
        return "Sorry, I cannot categorise that."
    words = re.findall(r"[\w-]+", phrase.lower())
    return json.dumps({"category": " ".join(words[-2:])})


def _cluster(user: str) -> str:
    labels = [line.strip()[2:] for line in user.splitlines() if line.strip().startswith("- ")]
    groups: dict[str, list[str]] = {}
    for label in labels:
        if "orphan" in label:
            continue
        head = label.split()[-1] if label.split() else label
        groups.setdefault(SYNONYMS.get(head, head), []).append(label)
    clusters = [
        {"label": key if key in members else min(members, key=lambda m: (len(m), m)),
         "members": sorted(members)}
        for key, members in sorted(groups.items())
    ]
    return json.dumps({"clusters": clusters})


def _rate(user: str, image: bytes | None, model: str) -> str:
    m = _RATE.search(user)
    if not m:
        return "No rating possible."
    feature, lo, hi = m.group(1), int(m.group(2)), int(m.group(3))
    img_key = hashlib.sha256(image or b"").hexdigest()
    if image is not None and hi - lo > 1 and any(w in feature.lower() for w in GREEN_WORDS):
        score = lo + round(green_fraction(image) * (hi - lo))
    else:
        score = lo + _h(model, feature, img_key) % (hi - lo + 1)
    confidence = 5 + _h("conf", model, feature, img_key) % 6
    return json.dumps({"score": score, "confidence": confidence})


def reply_for(body: dict) -> str:
    messages = body["messages"]
    system = messages[0]["content"].lower()
    user, image = _text_and_image(messages[1]["content"])
    if "condense" in system:
        return _condense(user)
    if "cluster" in system:
        return _cluster(user)
    if "extract" in system:
        return _extract(user)
    return _rate(user, image, body.get("model", ""))


def completion_body(text: str, model: str = "stub") -> dict:
    return {
        "id": "stub",
        "object": "chat.completion",
        "model": model,
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text},
                     "finish_reason": "stop"}],
    }


def handle(request: httpx.Request) -> httpx.Response:
    if not request.url.path.endswith("/v1/chat/completions"):
        return httpx.Response(404, json={"error": "not found"})
    body = json.loads(request.content)
    return httpx.Response(200, json=completion_body(reply_for(body), body.get("model", "stub")))


def stub_transport() -> httpx.MockTransport:
    return httpx.MockTransport(handle)


# -- engineered literature corpus -------------------------------------------------------

# (phrase, outcome text, direction text, publication numbers)
STUB_FINDINGS = (
    ("walking in the urban forest", "positive affect", "increase", (1, 2)),
    ("jogging through urban forest", "positive affect", "increased", (1,)),
    ("visits to an urban woodland", "positive_affect", "higher", (3, 4)),
    ("access to green space", "positive affect", "increase", (5, 6, 7)),
    ("access to green space", "negative affect", "decrease", (5, 8, 9)),
    ("hearing Bird Song", "perceived stress", "reduced", (10, 11, 12)),
    ("exposure to traffic noise", "stress", "increase", (13, 14, 15, 16)),
    ("exposure to traffic noise", "negative affect", "increase", (13, 17, 18)),
    ("clear blue sky", "positive affect", "increase", (19, 20)),
    ("commuting in crowded trains", "negative affect", "increase", (21,)),
    ("bright street lighting", "stress", "unchanged", (22, 23, 24, 25)),
    ("a nonresponse item", "positive affect", "increase", (26, 27, 28)),
    ("living near an orphan lake", "stress", "decrease", (29, 30, 31)),
    ("good sleep quality", "sleep", "increase", (32,)),
)
STUB_INVALID = (33, 34)
STUB_NO_FULLTEXT = (35, 36)
STUB_MISSING_XML = (37,)
STUB_N_DOCS = 50


def _jats(title: str, paragraphs: list[str]) -> str:
    from xml.sax.saxutils import escape

    body = "".join(f"<p>{escape(p)}</p>" for p in paragraphs)
    return (f"<article><front><article-meta><title-group><article-title>{escape(title)}"
            f"</article-title></title-group></article-meta></front><body><sec><title>Results"
            f"</title>{body}</sec></body></article>")


def build_stub_corpus(root, n_docs: int = STUB_N_DOCS, page_size: int = 7) -> list[dict]:
    """Write a replayable search + full-text corpus; returns the search records."""
    from .epmc import write_replay_corpus

    lines: dict[int, list[str]] = {i: [] for i in range(1, n_docs + 1)}
    for phrase, outcome, direction, pubs in STUB_FINDINGS:
        for i in pubs:
            lines[i].append(f"FINDING: {phrase} | {outcome} | {direction}")
    records, fulltexts = [], {}
    for i in range(1, n_docs + 1):
        pmcid = f"PMC{900000 + i}"
        has_ft = i not in STUB_NO_FULLTEXT
        records.append({"id": str(30000000 + i), "source": "MED", "pmcid": pmcid,
                        "title": f"Stub study {i}", "inEPMC": "Y" if has_ft else "N",
                        "isOpenAccess": "Y" if has_ft else "N"})
        if not has_ft or i in STUB_MISSING_XML:
            continue
        paras = [f"Participants in study {i} completed daily diaries."] + lines[i]
        if i in STUB_INVALID:
            paras.append("STUB-INVALID")
        fulltexts[("PMC", pmcid)] = _jats(f"Stub study {i}", paras)
    write_replay_corpus(root, records, fulltexts, page_size=page_size)
    return records
