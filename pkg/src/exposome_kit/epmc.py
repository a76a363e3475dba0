"""Europe PMC REST client: cursor-paginated search and full-text retrieval.

Search progress and full texts are cached on disk so that an interrupted
search resumes from its last cursor and a finished one replays offline.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import httpx

from ._io import atomic_write_text
from .retry import RetryPolicy

log = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://www.ebi.ac.uk/europepmc/webservices/rest"
BASE_URL_ENV = "EXPOSOME_EPMC_BASE_URL"
PAGE_SIZE = 1000
START_CURSOR = "*"


class EpmcError(Exception):
    pass


class EpmcHTTPError(EpmcError):
    def __init__(self, message: str, status: int | None = None, attempts: int = 0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class CursorLoopError(EpmcError):
    pass


class NoFulltextError(EpmcError):
    pass


class FulltextParseError(EpmcError):
    def __init__(self, epmc_id: str, detail: str):
        super().__init__(f"{epmc_id}: {detail}")
        self.epmc_id = epmc_id


@dataclass(frozen=True)
class SearchQuery:
    mandatory_terms: tuple[str, ...] = ("Psychology",)
    outcome_terms: tuple[str, ...] = ()
    context_terms: tuple[str, ...] = ()
    open_access_only: bool = True
    extra_filters: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.mandatory_terms:
            raise ValueError("at least one mandatory term is required")


def _quote(term: str) -> str:
    return '"' + term.replace('"', "").strip() + '"'


def build_query(q: SearchQuery) -> str:
    """Mandatory terms AND-ed, each optional group OR-ed in parentheses."""
    parts = [_quote(t) for t in q.mandatory_terms]
    for group in (q.outcome_terms, q.context_terms):
        if group:
            parts.append("(" + " OR ".join(_quote(t) for t in group) + ")")
    parts.extend(q.extra_filters)
    if q.open_access_only:
        parts.append("OPEN_ACCESS:Y")
    return " AND ".join(parts)


@dataclass(frozen=True)
class PubRecord:
    epmc_id: str
    source: str
    title: str
    has_fulltext: bool
    pmcid: str | None = None
    fulltext: str | None = None

    @classmethod
    def from_api(cls, item: dict) -> "PubRecord":
        pmcid = item.get("pmcid")
        has_ft = item.get("inEPMC") == "Y" or (item.get("isOpenAccess") == "Y" and bool(pmcid))
        return cls(
            epmc_id=str(item["id"]),
            source=str(item.get("source", "MED")),
            title=(item.get("title") or "").strip(),
            has_fulltext=has_ft,
            pmcid=pmcid,
        )

    @property
    def fulltext_key(self) -> tuple[str, str]:
        return ("PMC", self.pmcid) if self.pmcid else (self.source, self.epmc_id)


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# -- XML to text ----------------------------------------------------------------

_DROP = {"math", "tex-math", "inline-formula", "disp-formula", "ref-list", "xref", "table-wrap"}
_BLOCKS = {"p", "title", "article-title"}


def _local(tag) -> str:
    return tag.rsplit("}", 1)[-1] if isinstance(tag, str) else ""


def _inline_text(el: ET.Element) -> str:
    out = [el.text or ""]
    for child in el:
        if _local(child.tag) not in _DROP:
            out.append(_inline_text(child))
        out.append(child.tail or "")
    return "".join(out)


def xml_to_text(xml: str | bytes, epmc_id: str = "?") -> str:
    """Paragraph-preserving plain text of a JATS article; math markup is dropped."""
    try:
        root = ET.fromstring(xml)
    except ET.ParseError as exc:
        raise FulltextParseError(epmc_id, f"malformed XML: {exc}") from exc
    blocks: list[str] = []

    def walk(el: ET.Element):
        name = _local(el.tag)
        if name in _DROP:
            return
        if name in _BLOCKS:
            text = " ".join(_inline_text(el).split())
            if text:
                blocks.append(text)
            return
        for child in el:
            walk(child)

    front = [e for e in root.iter() if _local(e.tag) in ("article-title", "abstract")]
    body = [e for e in root.iter() if _local(e.tag) == "body"]
    roots = front[:1] + [e for e in front if _local(e.tag) == "abstract"] + body
    for el in roots or [root]:
        walk(el)
    return "\n\n".join(blocks) + ("\n" if blocks else "")


# -- client ---------------------------------------------------------------------


class EpmcClient:
    def __init__(
        self,
        base_url: str | None = None,
        cache_dir: str | os.PathLike | None = None,
        *,
        transport: httpx.BaseTransport | None = None,
        retry: RetryPolicy = RetryPolicy(),
        page_size: int = PAGE_SIZE,
        max_in_flight: int = 8,
        timeout: float = 60.0,
    ):
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV) or DEFAULT_BASE_URL).rstrip("/")
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.retry = retry
        self.page_size = page_size
        self.max_in_flight = max_in_flight
        self.http = httpx.Client(transport=transport, timeout=timeout)
        self.requests_made = 0
        self._count_lock = threading.Lock()

    def close(self):
        self.http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _get(self, url: str, params: dict | None = None) -> httpx.Response:
        last: Exception | None = None
        for attempt in range(1, self.retry.max_attempts + 1):
            if attempt > 1:
                self.retry.wait(attempt - 1)
            with self._count_lock:
                self.requests_made += 1
            try:
                resp = self.http.get(url, params=params)
            except httpx.TransportError as exc:
                last = exc
                log.warning("GET %s failed (%s), attempt %d", url, exc, attempt)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = EpmcHTTPError(f"HTTP {resp.status_code}", resp.status_code, attempt)
                continue
            return resp
        status = last.status if isinstance(last, EpmcHTTPError) else None
        raise EpmcHTTPError(
            f"GET {url} failed after {self.retry.max_attempts} attempts: {last}",
            status, self.retry.max_attempts,
        )

    # search ------------------------------------------------------------------

    def _state_path(self, query: str) -> Path | None:
        return self.cache_dir / "index" / f"{_digest(query)}.json" if self.cache_dir else None

    def _record_path(self, epmc_id: str, source: str) -> Path:
        h = _digest(f"{source}/{epmc_id}")
        return self.cache_dir / "records" / h[:2] / f"{h}.json"

    def _load_state(self, query: str) -> dict:
        path = self._state_path(query)
        if path and path.exists():
            return json.loads(path.read_text(encoding="utf-8"))
        return {"query": query, "cursor": START_CURSOR, "seen_cursors": [], "ids": [],
                "complete": False, "hit_count": None}

    def _save_state(self, state: dict) -> None:
        path = self._state_path(state["query"])
        if path:
            atomic_write_text(path, json.dumps(state, indent=1, sort_keys=True))

    def search(self, query: str) -> Iterator[PubRecord]:
        """Yield every hit once, resuming from the persisted cursor if any."""
        state = self._load_state(query)
        seen: set[tuple[str, str]] = set()
        for source, epmc_id in state["ids"]:
            rec = PubRecord(**json.loads(self._record_path(epmc_id, source).read_text("utf-8")))
            seen.add((source, epmc_id))
            yield rec
        cursor = state["cursor"]
        while not state["complete"]:
            resp = self._get(
                f"{self.base_url}/search",
                {"query": query, "format": "json", "pageSize": self.page_size,
                 "cursorMark": cursor, "resultType": "lite"},
            )
            if resp.status_code != 200:
                raise EpmcHTTPError(f"search returned HTTP {resp.status_code}", resp.status_code, 1)
            payload = resp.json()
            state["hit_count"] = payload.get("hitCount", state["hit_count"])
            items = payload.get("resultList", {}).get("result", [])
            nxt = payload.get("nextCursorMark")
            page = []
            for item in items:
                rec = PubRecord.from_api(item)
                key = (rec.source, rec.epmc_id)
                if key in seen:
                    continue
                seen.add(key)
                page.append(rec)
            if nxt and nxt != cursor and nxt in state["seen_cursors"]:
                raise CursorLoopError(f"cursor {nxt!r} returned twice for query {query!r}")
            state["seen_cursors"].append(cursor)
            # the service signals the last page by echoing the cursor back
            done = not items or not nxt or nxt == cursor
            if self.cache_dir:
                for rec in page:
                    atomic_write_text(self._record_path(rec.epmc_id, rec.source),
                                      json.dumps(asdict(rec), sort_keys=True))
            state["ids"].extend([rec.source, rec.epmc_id] for rec in page)
            state["cursor"] = cursor = nxt or cursor
            state["complete"] = done
            self._save_state(state)
            yield from page

    def hit_count(self, query: str) -> int | None:
        return self._load_state(query).get("hit_count")

    # full text ---------------------------------------------------------------

    def _fulltext_path(self, source: str, epmc_id: str) -> Path:
        h = _digest(f"{source}/{epmc_id}")
        return self.cache_dir / "fulltext" / h[:2] / f"{h}.txt"

    def fetch_fulltext(self, epmc_id: str, source: str = "PMC") -> str:
        if self.cache_dir:
            path = self._fulltext_path(source, epmc_id)
            if path.exists():
                return path.read_bytes().decode("utf-8")
        resp = self._get(f"{self.base_url}/{source}/{epmc_id}/fullTextXML")
        if resp.status_code == 404:
            raise NoFulltextError(f"no full text for {source}/{epmc_id}")
        if resp.status_code != 200:
            raise EpmcHTTPError(f"fullTextXML returned HTTP {resp.status_code}", resp.status_code, 1)
        text = xml_to_text(resp.content, f"{source}/{epmc_id}")
        if self.cache_dir:
            atomic_write_text(self._fulltext_path(source, epmc_id), text)
        return text

    def fetch_record(self, record: PubRecord) -> str:
        source, epmc_id = record.fulltext_key
        return self.fetch_fulltext(epmc_id, source)

    def fetch_many(
        self, records: Sequence[PubRecord], max_in_flight: int | None = None
    ) -> list[str | EpmcError]:
        """Fetch full texts in parallel; failures are returned in place."""

        def one(rec: PubRecord):
            try:
                return self.fetch_record(rec)
            except EpmcError as exc:
                return exc

        workers = max(1, max_in_flight or self.max_in_flight)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, records))


# -- offline replay ---------------------------------------------------------------


class ReplayTransport(httpx.BaseTransport):
    """Serve a recorded corpus laid out like the REST API.

    ``root/search/<cursor>.json`` holds search pages keyed by the cursor that
    requests them (``*`` is stored as ``start``); ``root/fulltext/<SOURCE>_<ID>.xml``
    holds full texts.  Missing full texts answer 404.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.calls = 0

    @staticmethod
    def cursor_file(cursor: str) -> str:
        return "start.json" if cursor == START_CURSOR else f"{_digest(cursor)[:16]}.json"

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        self.calls += 1
        path = request.url.path
        if path.endswith("/search"):
            cursor = request.url.params.get("cursorMark", START_CURSOR)
            f = self.root / "search" / self.cursor_file(cursor)
            if not f.exists():
                return httpx.Response(404, text="unknown cursor")
            return httpx.Response(200, content=f.read_bytes(),
                                  headers={"content-type": "application/json"})
        if path.endswith("/fullTextXML"):
            source, epmc_id = path.split("/")[-3:-1]
            f = self.root / "fulltext" / f"{source}_{epmc_id}.xml"
            if not f.exists():
                return httpx.Response(404, text="not found")
            return httpx.Response(200, content=f.read_bytes(),
                                  headers={"content-type": "application/xml"})
        return httpx.Response(404, text="unsupported endpoint")


def write_replay_corpus(
    root: str | os.PathLike,
    records: Sequence[dict],
    fulltexts: dict[tuple[str, str], str],
    page_size: int = 2,
) -> None:
    """Record a corpus in the layout ``ReplayTransport`` serves."""
    root = Path(root)
    pages = [records[i : i + page_size] for i in range(0, len(records), page_size)] or [[]]
    cursors = [START_CURSOR] + [f"cursor-{i}" for i in range(1, len(pages) + 1)]
    for i, page in enumerate(pages):
        payload = {
            "hitCount": len(records),
            "nextCursorMark": cursors[i + 1],
            "resultList": {"result": list(page)},
        }
        atomic_write_text(root / "search" / ReplayTransport.cursor_file(cursors[i]),
                          json.dumps(payload, sort_keys=True))
    last = cursors[len(pages)]
    atomic_write_text(
        root / "search" / ReplayTransport.cursor_file(last),
        json.dumps({"hitCount": len(records), "nextCursorMark": last,
                    "resultList": {"result": []}}, sort_keys=True),
    )
    for (source, epmc_id), xml in fulltexts.items():
        atomic_write_text(root / "fulltext" / f"{source}_{epmc_id}.xml", xml)
