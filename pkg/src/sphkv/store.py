"""Tier-homogeneous paged KV storage with bit-exact byte accounting and a
deterministic traffic meter standing in for HBM counters.

Layout contract:
    - every page holds items of exactly one tier for one (layer, head);
    - page payloads are structure-of-arrays: all angle codes for
      coordinate 0, then coordinate 1, ..., then the radius codes, then
      the dense value block (accounted at 2 bytes per entry);
    - a page's radius_scale never decreases; appends that do not fit open
      a new page instead of rescaling;
    - the pointer table lists pages per (layer, head) in append order.

Accounting constants (fixed so every byte assertion is exact):
    - page header: 16 bytes;
    - pointer table: 8 bytes per (layer, head) list head plus 8 per page,
      plus a 30-byte root directory (magic + dims) shared with the
      snapshot format;
    - protect bitmap: 1 bit per used slot, whole-byte rounded per page;
    - tier tags: meta_bits per used item, whole-byte rounded per page;
    - fragmentation: unused slots times the per-slot byte cost.

Every byte the decode path touches is added to the meter by the code
path that touches it; nothing else writes the meter.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import codec
from .bitpack import pack_bits, packed_nbytes, unpack_bits
from .codec import DROP_TIER_ID, SphericalKey, TierSpec, TierTable

PAGE_HEADER_BYTES = 16
PTR_ENTRY_BYTES = 8
VALUE_BYTES_PER_ENTRY = 2
FILE_MAGIC = b"SPHKV1"
FILE_DIRECTORY_BYTES = len(FILE_MAGIC) + 24  # magic + six u32 dims

METER_CATEGORIES = ("header", "k_codes", "values", "dense_k_write", "dense_k_read")

# Headroom applied to the radius scale of pages opened by decode-time
# appends, so a run of slowly growing radii does not open a page per token.
APPEND_SCALE_HEADROOM = 1.25


class TrafficMeter:
    """Monotone read/write byte accumulators with per-category counters.

    b_HBM = (read + write) / decode_tokens over the metered window. A
    reset starts a new measurement window. Thread-safe so concurrent
    readers never lose counts.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        with getattr(self, "_lock", threading.Lock()):
            self.read_bytes = 0
            self.write_bytes = 0
            self.decode_tokens = 0
            self.category = {c: 0 for c in METER_CATEGORIES}

    def add_read(self, category: str, nbytes: int):
        with self._lock:
            self.read_bytes += int(nbytes)
            self.category[category] += int(nbytes)

    def add_write(self, category: str, nbytes: int):
        with self._lock:
            self.write_bytes += int(nbytes)
            self.category[category] += int(nbytes)

    def add_batch(self, reads=(), writes=()):
        """Accumulate several (category, bytes) pairs under one lock; hot
        paths batch their per-page counts into one call per step."""
        with self._lock:
            for cat, nbytes in reads:
                self.read_bytes += int(nbytes)
                self.category[cat] += int(nbytes)
            for cat, nbytes in writes:
                self.write_bytes += int(nbytes)
                self.category[cat] += int(nbytes)

    def tick(self, n: int = 1):
        with self._lock:
            self.decode_tokens += n

    @property
    def total_bytes(self) -> int:
        return self.read_bytes + self.write_bytes

    def b_hbm(self):
        """Bytes per decode token, or None before any token is metered."""
        if self.decode_tokens == 0:
            return None
        return self.total_bytes / self.decode_tokens

    def snapshot(self) -> dict:
        with self._lock:
            snap = dict(self.category)
            snap["read_bytes"] = self.read_bytes
            snap["write_bytes"] = self.write_bytes
            snap["decode_tokens"] = self.decode_tokens
        return snap


@dataclass
class ResidentBreakdown:
    payload_bytes: int = 0
    header_bytes: int = 0
    ptr_bytes: int = 0
    tag_bytes: int = 0
    prot_bytes: int = 0
    frag_bytes: int = 0

    @property
    def total(self) -> int:
        return (self.payload_bytes + self.header_bytes + self.ptr_bytes
                + self.tag_bytes + self.prot_bytes + self.frag_bytes)

    @property
    def eta_meta(self) -> float:
        """Fraction of resident bytes that is not payload."""
        if self.total == 0:
            return 0.0
        return (self.total - self.payload_bytes) / self.total


class Page:
    """One tier-homogeneous page: preallocated slots, write-once payload."""

    __slots__ = ("tier", "layer", "head", "capacity", "count", "radius_scale",
                 "angle_codes", "radius_codes", "values", "protect", "token_ids",
                 "_feat_cache")

    def __init__(self, tier: TierSpec, layer: int, head: int, capacity: int,
                 radius_scale: float, d: int, d_v: int):
        if tier.is_drop:
            raise ValueError("pages cannot hold the drop tier")
        if radius_scale <= 0:
            raise ValueError("radius_scale must be positive")
        self.tier = tier
        self.layer = layer
        self.head = head
        self.capacity = capacity
        self.count = 0
        self.radius_scale = float(radius_scale)
        self.angle_codes = np.zeros((capacity, d - 1), dtype=np.uint64)
        self.radius_codes = np.zeros(capacity, dtype=np.uint64)
        self.values = np.zeros((capacity, d_v), dtype=np.float64)
        self.protect = np.zeros(capacity, dtype=bool)
        self.token_ids = np.full(capacity, -1, dtype=np.int64)
        self._feat_cache = None  # derived, decode-side; never accounted

    @property
    def full(self) -> bool:
        return self.count >= self.capacity

    def add(self, angle_codes: np.ndarray, radius_code: int, value: np.ndarray,
            protect: bool, token_id: int):
        i = self.count
        self.angle_codes[i] = angle_codes
        self.radius_codes[i] = radius_code
        self.values[i] = value
        self.protect[i] = protect
        self.token_ids[i] = token_id
        self.count += 1

    # -- exact per-page byte formulas -------------------------------------

    def angle_stream_bytes(self, d: int) -> int:
        return packed_nbytes(self.count * (d - 1), self.tier.angle_bits)

    def radius_stream_bytes(self) -> int:
        return packed_nbytes(self.count, self.tier.radius_bits)

    def value_block_bytes(self, d_v: int) -> int:
        return self.count * d_v * VALUE_BYTES_PER_ENTRY

    def payload_bytes(self, d: int, d_v: int) -> int:
        return (self.angle_stream_bytes(d) + self.radius_stream_bytes()
                + self.value_block_bytes(d_v))

    def tag_bytes(self) -> int:
        return (self.count * self.tier.meta_bits + 7) // 8

    def prot_bytes(self) -> int:
        return (self.count + 7) // 8

    def slot_bytes(self, d: int, d_v: int) -> int:
        """Byte cost of one full slot, used for the fragmentation model."""
        key_bits = (d - 1) * self.tier.angle_bits + self.tier.radius_bits + self.tier.meta_bits
        return (key_bits + 7) // 8 + d_v * VALUE_BYTES_PER_ENTRY

    def frag_bytes(self, d: int, d_v: int) -> int:
        return (self.capacity - self.count) * self.slot_bytes(d, d_v)

    def angle_stream(self, d: int) -> np.ndarray:
        """Packed SoA angle bit stream (coordinate-major)."""
        soa = self.angle_codes[: self.count].T.reshape(-1)
        return pack_bits(soa, self.tier.angle_bits)

    def radius_stream(self) -> np.ndarray:
        return pack_bits(self.radius_codes[: self.count], self.tier.radius_bits)


class PagedStore:
    """Paged, tier-homogeneous store for coded keys and dense values."""

    def __init__(self, tiers: TierTable, layers: int, heads: int, d: int, d_v: int,
                 page_size: int, meter: TrafficMeter | None = None):
        if page_size < 1:
            raise ValueError("page size must be >= 1")
        tiers.validate_rates(d)
        self.tiers = tiers
        self.layers = layers
        self.heads = heads
        self.d = d
        self.d_v = d_v
        self.page_size = page_size
        self.meter = meter if meter is not None else TrafficMeter()
        self.pages: list[Page] = []
        self.pointer: dict[tuple[int, int], list[int]] = {
            (l, h): [] for l in range(layers) for h in range(heads)
        }
        # last open page per (layer, head, tier) group
        self._group_last: dict[tuple[int, int, int], int] = {}

    # -- construction ------------------------------------------------------

    def _open_page(self, layer: int, head: int, tier: TierSpec, radius_scale: float,
                   meter_write: bool) -> Page:
        page = Page(tier, layer, head, self.page_size, radius_scale, self.d, self.d_v)
        self.pages.append(page)
        idx = len(self.pages) - 1
        self.pointer[(layer, head)].append(idx)
        self._group_last[(layer, head, tier.id)] = idx
        if meter_write:
            self.meter.add_write("header", PAGE_HEADER_BYTES + PTR_ENTRY_BYTES)
        return page

    def append_item(self, layer: int, head: int, key: SphericalKey, value: np.ndarray,
                    tier_id: int, protected: bool = False, token_id: int = -1,
                    meter_write: bool = True):
        """Append one coded state; drop tier is a metered no-op.

        The write meter charges only the thin slice: the item's code and
        value bytes, plus header and pointer bytes when a page opens.
        """
        if tier_id == DROP_TIER_ID:
            return
        tier = self.tiers.spec_for(tier_id)
        gkey = (layer, head, tier_id)
        idx = self._group_last.get(gkey)
        page = self.pages[idx] if idx is not None else None
        if page is None or page.full or key.radius > page.radius_scale:
            scale = max(key.radius * APPEND_SCALE_HEADROOM, 1e-9)
            if page is None and key.radius == 0.0:
                scale = 1e-9
            page = self._open_page(layer, head, tier, scale, meter_write)
        a, r = codec.encode_key(key, tier, page.radius_scale)
        page.add(a.codes, r.code, value, protected, token_id)
        if meter_write:
            key_bytes = (packed_nbytes(self.d - 1, tier.angle_bits)
                         + packed_nbytes(1, tier.radius_bits))
            self.meter.add_write("k_codes", key_bytes)
            self.meter.add_write("values", self.d_v * VALUE_BYTES_PER_ENTRY)

    def set_protect(self, page_idx: int, slot: int, flag: bool):
        """Flip a protect bit; bounded metadata traffic (one byte write)."""
        self.pages[page_idx].protect[slot] = flag
        self.meter.add_write("header", 1)

    # -- streaming ---------------------------------------------------------

    def stream_pages(self, layer: int, head: int, metered: bool = True):
        """Yield pages of (layer, head) in pointer order, metering each
        page's header, code streams, and value block exactly once."""
        if (layer, head) not in self.pointer:
            raise KeyError(f"unknown (layer, head) = {(layer, head)}")
        for idx in self.pointer[(layer, head)]:
            page = self.pages[idx]
            if metered:
                self.meter.add_read("header", PAGE_HEADER_BYTES)
                self.meter.add_read("k_codes",
                                    page.angle_stream_bytes(self.d) + page.radius_stream_bytes())
                self.meter.add_read("values", page.value_block_bytes(self.d_v))
            yield idx, page

    def stream_head(self, layer: int, head: int, metered: bool = True):
        """Per-item view of stream_pages: yields
        (tier_id, decoded_radius, AngleCode, value, protect_flag)."""
        for _, page in self.stream_pages(layer, head, metered=metered):
            bits = page.tier.radius_bits
            levels = float((1 << bits) - 1)
            radii = page.radius_codes[: page.count].astype(np.float64) / levels * page.radius_scale
            for j in range(page.count):
                yield (page.tier.id, float(radii[j]),
                       codec.AngleCode(page.angle_codes[j].copy()),
                       page.values[j], bool(page.protect[j]))

    def retained_count(self, layer: int | None = None, head: int | None = None) -> int:
        def keep(p):
            return ((layer is None or p.layer == layer)
                    and (head is None or p.head == head))
        return sum(p.count for p in self.pages if keep(p))

    def expected_stream_bytes(self, layer: int, head: int) -> int:
        """Closed-form bytes one full stream of (layer, head) must meter."""
        total = 0
        for idx in self.pointer[(layer, head)]:
            p = self.pages[idx]
            total += (PAGE_HEADER_BYTES + p.angle_stream_bytes(self.d)
                      + p.radius_stream_bytes() + p.value_block_bytes(self.d_v))
        return total

    # -- accounting ---------------------------------------------------------

    def resident_breakdown(self) -> ResidentBreakdown:
        br = ResidentBreakdown()
        for p in self.pages:
            br.payload_bytes += p.payload_bytes(self.d, self.d_v)
            br.tag_bytes += p.tag_bytes()
            br.prot_bytes += p.prot_bytes()
            br.frag_bytes += p.frag_bytes(self.d, self.d_v)
        br.header_bytes = PAGE_HEADER_BYTES * len(self.pages)
        br.ptr_bytes = (FILE_DIRECTORY_BYTES
                        + PTR_ENTRY_BYTES * (self.layers * self.heads + len(self.pages)))
        return br

    def b_kv(self, t_active: int) -> float:
        if t_active < 1:
            raise ValueError("T_active must be >= 1")
        return self.resident_breakdown().total / t_active

    def check_invariants(self):
        """Hard asserts: tier homogeneity, scale bound, pointer coverage."""
        seen = set()
        for (l, h), idxs in self.pointer.items():
            for idx in idxs:
                assert idx not in seen, "page listed twice"
                seen.add(idx)
                p = self.pages[idx]
                assert (p.layer, p.head) == (l, h)
                assert p.count <= p.capacity
                if p.count:
                    bits = p.tier.radius_bits
                    radii = p.radius_codes[:p.count].astype(np.float64)
                    radii = radii / float((1 << bits) - 1) * p.radius_scale
                    assert radii.max() <= p.radius_scale * (1 + 1e-9)
        assert len(seen) == len(self.pages), "orphan pages outside pointer table"

    # -- snapshot ------------------------------------------------------------

    def to_file(self, path: str):
        """Flat binary snapshot; file size == resident total - frag bytes.

        Layout: magic `SPHKV1`, u32 (layers, heads, d, d_v, page_size,
        n_pages); per page: 16-byte header (u8 tier, u8 layer, u8 head,
        u8 pad, u32 count, f64 radius_scale), protect bitmap, tag bytes
        (zero filler for meta bits), packed angle stream, packed radius
        stream, float16 value block; then the pointer table as one u64
        list length plus u64 page indices per (layer, head).
        """
        with open(path, "wb") as f:
            f.write(FILE_MAGIC)
            f.write(struct.pack("<6I", self.layers, self.heads, self.d, self.d_v,
                                self.page_size, len(self.pages)))
            for p in self.pages:
                f.write(struct.pack("<BBBBId", p.tier.id, p.layer, p.head, 0,
                                    p.count, p.radius_scale))
                f.write(np.packbits(p.protect[: p.count]).tobytes())
                f.write(b"\x00" * p.tag_bytes())
                f.write(p.angle_stream(self.d).tobytes())
                f.write(p.radius_stream().tobytes())
                f.write(p.values[: p.count].astype(np.float16).tobytes())
            for l in range(self.layers):
                for h in range(self.heads):
                    idxs = self.pointer[(l, h)]
                    f.write(struct.pack("<Q", len(idxs)))
                    f.write(np.asarray(idxs, dtype=np.uint64).tobytes())

    @classmethod
    def from_file(cls, path: str, tiers: TierTable) -> "PagedStore":
        with open(path, "rb") as f:
            magic = f.read(len(FILE_MAGIC))
            if magic != FILE_MAGIC:
                raise ValueError("bad magic: not a store snapshot")
            layers, heads, d, d_v, page_size, n_pages = struct.unpack("<6I", f.read(24))
            store = cls(tiers, layers, heads, d, d_v, page_size)
            for _ in range(n_pages):
                tid, layer, head, _, count, scale = struct.unpack("<BBBBId", f.read(16))
                tier = tiers.spec_for(tid)
                page = Page(tier, layer, head, page_size, scale, d, d_v)
                prot_n = (count + 7) // 8
                prot = np.unpackbits(np.frombuffer(f.read(prot_n), dtype=np.uint8))[:count]
                f.read((count * tier.meta_bits + 7) // 8)
                a_n = packed_nbytes(count * (d - 1), tier.angle_bits)
                soa = unpack_bits(np.frombuffer(f.read(a_n), dtype=np.uint8),
                                  tier.angle_bits, count * (d - 1))
                r_n = packed_nbytes(count, tier.radius_bits)
                rcodes = unpack_bits(np.frombuffer(f.read(r_n), dtype=np.uint8),
                                     tier.radius_bits, count)
                vals = np.frombuffer(f.read(count * d_v * 2), dtype=np.float16)
                page.angle_codes[:count] = soa.reshape(d - 1, count).T
                page.radius_codes[:count] = rcodes
                page.values[:count] = vals.reshape(count, d_v).astype(np.float64)
                page.protect[:count] = prot.astype(bool)
                page.count = count
                store.pages.append(page)
            for l in range(layers):
                for h in range(heads):
                    (n,) = struct.unpack("<Q", f.read(8))
                    idxs = np.frombuffer(f.read(8 * n), dtype=np.uint64)
                    store.pointer[(l, h)] = [int(i) for i in idxs]
        for (l, h), idxs in store.pointer.items():
            for idx in idxs:
                p = store.pages[idx]
                store._group_last[(l, h, p.tier.id)] = idx
        return store


def pack_pages_arrays(assignment, radii: np.ndarray, angles: np.ndarray,
                      values: np.ndarray, tiers: TierTable, page_size: int,
                      meter: TrafficMeter | None = None) -> PagedStore:
    """Pack retained states into a fresh tier-homogeneous paged store.

    `assignment` carries (z, tier, protected) arrays over the full
    (layer, head, token) grid; radii/angles/values are the matching
    per-state data. Retained states are grouped by (layer, head, tier)
    in stable (layer, head, token) order, chunked into pages of at most
    page_size items, each page scaled by its own max radius. Write
    traffic is metered for headers, code streams, and value blocks.
    """
    if radii.shape != assignment.z.shape or angles.shape[:3] != radii.shape:
        raise KeyError("assignment references states missing from the key arrays")
    if values.shape[:3] != radii.shape:
        raise KeyError("assignment references states missing from the value arrays")
    layers, heads, _ = radii.shape
    d = angles.shape[-1] + 1
    d_v = values.shape[-1]
    store = PagedStore(tiers, layers, heads, d, d_v, page_size, meter)
    if np.any((assignment.z == 1) & (assignment.tier == DROP_TIER_ID)):
        raise ValueError("retained state assigned to the drop tier")

    for l in range(layers):
        for h in range(heads):
            tier_row = assignment.tier[l, h]
            z_row = assignment.z[l, h]
            for tier in tiers.non_drop:
                toks = np.nonzero((z_row == 1) & (tier_row == tier.id))[0]
                if toks.size == 0:
                    continue
                levels = float((1 << tier.radius_bits) - 1)
                for start in range(0, toks.size, page_size):
                    chunk = toks[start:start + page_size]
                    n = chunk.size
                    scale = max(float(radii[l, h, chunk].max()), 1e-9)
                    page = store._open_page(l, h, tier, scale, meter_write=False)
                    page.angle_codes[:n] = codec.quantize_angles(
                        angles[l, h, chunk], tier.angle_bits)
                    page.radius_codes[:n] = np.rint(
                        np.clip(radii[l, h, chunk] / scale, 0.0, 1.0) * levels
                    ).astype(np.uint64)
                    page.values[:n] = values[l, h, chunk]
                    page.protect[:n] = assignment.protected[l, h, chunk]
                    page.token_ids[:n] = chunk
                    page.count = n
                    store.meter.add_write("header", PAGE_HEADER_BYTES + PTR_ENTRY_BYTES)
                    store.meter.add_write(
                        "k_codes",
                        page.angle_stream_bytes(d) + page.radius_stream_bytes())
                    store.meter.add_write("values", page.value_block_bytes(d_v))
    store.check_invariants()
    return store


class DenseStore:
    """Uncompressed baseline: paged dense K/V with the same accounting.

    Keys and values are accounted at 2 bytes per entry; streaming meters
    headers, dense key bytes (dense_k_read), and value bytes.
    """

    def __init__(self, layers: int, heads: int, d: int, d_v: int, page_size: int,
                 meter: TrafficMeter | None = None):
        self.layers = layers
        self.heads = heads
        self.d = d
        self.d_v = d_v
        self.page_size = page_size
        self.meter = meter if meter is not None else TrafficMeter()
        cap = page_size
        self._keys = {(l, h): np.zeros((cap, d)) for l in range(layers) for h in range(heads)}
        self._values = {(l, h): np.zeros((cap, d_v)) for l in range(layers) for h in range(heads)}
        self._counts = {(l, h): 0 for l in range(layers) for h in range(heads)}

    def append_item(self, layer, head, key_dense, value, meter_write=True):
        k = (layer, head)
        n = self._counts[k]
        buf = self._keys[k]
        if n >= buf.shape[0]:
            grow = max(buf.shape[0] * 2, n + 1)
            self._keys[k] = np.vstack([buf, np.zeros((grow - buf.shape[0], self.d))])
            vb = self._values[k]
            self._values[k] = np.vstack([vb, np.zeros((grow - vb.shape[0], self.d_v))])
        new_page = n % self.page_size == 0
        self._keys[k][n] = key_dense
        self._values[k][n] = value
        self._counts[k] = n + 1
        if meter_write:
            if new_page:
                self.meter.add_write("header", PAGE_HEADER_BYTES + PTR_ENTRY_BYTES)
            self.meter.add_write("dense_k_write", self.d * VALUE_BYTES_PER_ENTRY)
            self.meter.add_write("values", self.d_v * VALUE_BYTES_PER_ENTRY)

    def bulk_load(self, keys, values, metered=False):
        """Prefill load: keys (L, H, T, d), values (L, H, T, d_v)."""
        L, H, T, _ = keys.shape
        for l in range(L):
            for h in range(H):
                for i in range(T):
                    self.append_item(l, h, keys[l, h, i], values[l, h, i],
                                     meter_write=metered)

    def view(self, layer, head):
        n = self._counts[(layer, head)]
        return self._keys[(layer, head)][:n], self._values[(layer, head)][:n]

    def stream_dense(self, layer, head, metered=True):
        """Metered dense view: headers + dense K + values, once per call."""
        keys, values = self.view(layer, head)
        if metered:
            n = keys.shape[0]
            pages = (n + self.page_size - 1) // self.page_size
            self.meter.add_read("header", PAGE_HEADER_BYTES * pages)
            self.meter.add_read("dense_k_read", n * self.d * VALUE_BYTES_PER_ENTRY)
            self.meter.add_read("values", n * self.d_v * VALUE_BYTES_PER_ENTRY)
        return keys, values

    def retained_count(self, layer=None, head=None):
        return sum(n for (l, h), n in self._counts.items()
                   if (layer is None or l == layer) and (head is None or h == head))

    def resident_breakdown(self) -> ResidentBreakdown:
        br = ResidentBreakdown()
        pages = 0
        slot = (self.d + self.d_v) * VALUE_BYTES_PER_ENTRY
        for k, n in self._counts.items():
            p = (n + self.page_size - 1) // self.page_size
            pages += p
            br.payload_bytes += n * slot
            br.frag_bytes += (p * self.page_size - n) * slot
        br.header_bytes = PAGE_HEADER_BYTES * pages
        br.ptr_bytes = (FILE_DIRECTORY_BYTES
                        + PTR_ENTRY_BYTES * (self.layers * self.heads + pages))
        return br

    def b_kv(self, t_active: int) -> float:
        if t_active < 1:
            raise ValueError("T_active must be >= 1")
        return self.resident_breakdown().total / t_active


def dense_mem_estimate(batch: int, layers: int, tokens: int, heads: int,
                       d_k: int, d_v: int, bytes_per_entry: int) -> int:
    """Dense KV footprint: B * L * T * H * (d_K + d_V) * bytes."""
    for name, v in (("batch", batch), ("layers", layers), ("tokens", tokens),
                    ("heads", heads), ("d_k", d_k), ("d_v", d_v),
                    ("bytes_per_entry", bytes_per_entry)):
        if v <= 0:
            raise ValueError(f"{name} must be positive")
    return batch * layers * tokens * heads * (d_k + d_v) * bytes_per_entry
