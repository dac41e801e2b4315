"""Multi-round transfer scheduling over a PCIe-style device tree.

Devices hang off switches, switches hang off the host; every link is full
duplex, modeled as two directed capacities. A fetch round is a set of
transfers in which no directed link carries more than one transfer. For the
regular case of two devices per switch the scheduler emits a fixed shape:
one round of intra-switch exchanges, then one round per (switch offset,
source slot, destination slot) combination. That cross phase matches the
directed-link-load lower bound exactly; irregular topologies fall back to a
greedy first-fit packer.

Fetches come in two flavors: one-sided reads move payload only, two-sided
ones also push the requested row ids back along the reverse path (8 bytes
per id) and cost one synchronization event per transfer pair.
"""

from __future__ import annotations

import enum
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

HOST = "host"
INDEX_BYTES_PER_ID = 8


def dev_name(i: int) -> str:
    return f"d{i}"


def switch_name(i: int) -> str:
    return f"s{i}"


class FetchMode(enum.Enum):
    ONE_SIDED = "one_sided"
    TWO_SIDED = "two_sided"


@dataclass(frozen=True)
class Transfer:
    src: int  # device owning the rows
    dst: int  # device that requested them
    num_ids: int


@dataclass
class DeviceTopology:
    """devices: names d0..; switches: name -> member device names;
    links: directed (a, b) -> bandwidth, inserted both ways."""

    devices: list[str]
    switches: dict[str, list[str]]
    links: dict[tuple[str, str], float]
    _routes: dict = field(default_factory=dict, repr=False)

    @classmethod
    def pcie_tree(
        cls, num_switches: int, devices_per_switch: int, bandwidth: float = 1.0
    ) -> "DeviceTopology":
        devices, switches, links = [], {}, {}
        for s in range(num_switches):
            sname = switch_name(s)
            members = []
            for j in range(devices_per_switch):
                d = dev_name(s * devices_per_switch + j)
                devices.append(d)
                members.append(d)
                links[(d, sname)] = bandwidth
                links[(sname, d)] = bandwidth
            switches[sname] = members
            links[(sname, HOST)] = bandwidth
            links[(HOST, sname)] = bandwidth
        return cls(devices, switches, links)

    @property
    def num_devices(self) -> int:
        return len(self.devices)

    def device_switch(self, dev: int) -> str:
        name = dev_name(dev)
        for s, members in self.switches.items():
            if name in members:
                return s
        raise ValueError(f"device {name} belongs to no switch")

    def _adjacency(self) -> dict[str, list[str]]:
        adj = defaultdict(list)
        for a, b in self.links:
            adj[a].append(b)
        return adj

    def route(self, src_dev: int, dst_dev: int) -> list[tuple[str, str]]:
        """Directed links along the BFS path from src device to dst device."""
        key = (src_dev, dst_dev)
        if key in self._routes:
            return self._routes[key]
        a, b = dev_name(src_dev), dev_name(dst_dev)
        adj = self._adjacency()
        prev = {a: None}
        q = deque([a])
        while q:
            u = q.popleft()
            if u == b:
                break
            for v in sorted(adj[u]):
                if v not in prev:
                    prev[v] = u
                    q.append(v)
        if b not in prev:
            raise ValueError(f"no path {a} -> {b}")
        path = []
        node = b
        while prev[node] is not None:
            path.append((prev[node], node))
            node = prev[node]
        path.reverse()
        self._routes[key] = path
        return path

    def is_regular_pair_tree(self) -> bool:
        """Exactly two devices per switch, tree links only."""
        seen = []
        for members in self.switches.values():
            if len(members) != 2:
                return False
            seen.extend(members)
        if sorted(seen) != sorted(self.devices):
            return False
        expected = set()
        for s, members in self.switches.items():
            for d in members:
                expected |= {(d, s), (s, d)}
            expected |= {(s, HOST), (HOST, s)}
        return set(self.links) == expected


# ------------------------------------------------------------- file format


def parse_topology(path) -> DeviceTopology:
    """Plain text: 'device <i>', 'switch <i>: <dev> <dev> ...' and optional
    'link <a> <b> <bandwidth>' lines ('#' comments). Without link lines the
    tree links are synthesized with unit bandwidth."""
    devices, switches, links = [], {}, {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "device" and len(parts) == 2:
                    devices.append(dev_name(int(parts[1])))
                elif parts[0] == "switch" and parts[1].endswith(":"):
                    sid = int(parts[1][:-1])
                    switches[switch_name(sid)] = [dev_name(int(p)) for p in parts[2:]]
                elif parts[0] == "link" and len(parts) == 4:
                    a, b, bw = parts[1], parts[2], float(parts[3])
                    if bw <= 0:
                        raise ValueError("bandwidth must be positive")
                    links[(a, b)] = bw
                    links[(b, a)] = bw
                else:
                    raise ValueError(f"unrecognized line {line!r}")
            except (ValueError, IndexError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    if not devices or not switches:
        raise ValueError(f"{path}: needs at least one device and one switch")
    for s, members in switches.items():
        for d in members:
            if d not in devices:
                raise ValueError(f"{path}: switch {s} references unknown {d}")
    if not links:
        for s, members in switches.items():
            for d in members:
                links[(d, s)] = links[(s, d)] = 1.0
            links[(s, HOST)] = links[(HOST, s)] = 1.0
    return DeviceTopology(devices, switches, links)


# ---------------------------------------------------------------- planning


def merge_transfers(requests) -> list[Transfer]:
    """Collapse duplicate (src, dst) pairs; drop device-local requests."""
    acc: dict[tuple[int, int], int] = {}
    for r in requests:
        if r.src == r.dst or r.num_ids == 0:
            continue
        acc[(r.src, r.dst)] = acc.get((r.src, r.dst), 0) + r.num_ids
    return [Transfer(s, d, n) for (s, d), n in sorted(acc.items())]


def _slot(topo: DeviceTopology, dev: int) -> tuple[int, int]:
    sname = topo.device_switch(dev)
    s_idx = int(sname[1:])
    return s_idx, topo.switches[sname].index(dev_name(dev))


def _structured_rounds(topo, transfers) -> list[list[Transfer]]:
    num_switches = len(topo.switches)
    slots: list[list[Transfer]] = [[] for _ in range(1 + 4 * (num_switches - 1))]
    for t in transfers:
        ss, si = _slot(topo, t.src)
        ds, di = _slot(topo, t.dst)
        if ss == ds:
            slots[0].append(t)
        else:
            offset = (ds - ss) % num_switches
            slots[1 + 4 * (offset - 1) + 2 * si + di].append(t)
    return [r for r in slots if r]


def _greedy_rounds(topo, transfers) -> list[list[Transfer]]:
    order = sorted(transfers, key=lambda t: (-t.num_ids, t.src, t.dst))
    rounds: list[tuple[list[Transfer], set]] = []
    for t in order:
        path = set(topo.route(t.src, t.dst))
        for members, used in rounds:
            if not (path & used):
                members.append(t)
                used |= path
                break
        else:
            rounds.append(([t], set(path)))
    return [members for members, _ in rounds]


def plan_rounds(topo: DeviceTopology, transfers: list[Transfer]) -> list[list[Transfer]]:
    if not transfers:
        return []
    if topo.is_regular_pair_tree():
        rounds = _structured_rounds(topo, transfers)
    else:
        rounds = _greedy_rounds(topo, transfers)
    validate_rounds(topo, rounds)
    return rounds


def validate_rounds(topo: DeviceTopology, rounds) -> None:
    """No directed link may carry two transfers within one round."""
    for i, rnd in enumerate(rounds):
        used = set()
        for t in rnd:
            path = topo.route(t.src, t.dst)
            for e in path:
                if e in used:
                    raise AssertionError(f"round {i}: link {e} used twice")
            used.update(path)


def link_load_lower_bound(topo: DeviceTopology, transfers) -> int:
    """Max number of transfers sharing one directed link: no schedule can
    use fewer rounds than this."""
    load = defaultdict(int)
    for t in transfers:
        for e in topo.route(t.src, t.dst):
            load[e] += 1
    return max(load.values(), default=0)


# -------------------------------------------------------------- simulation


@dataclass
class TrafficStats:
    num_rounds: int
    num_transfers: int
    total_payload_bytes: int
    total_index_bytes: int
    sync_events: int
    completion_time: float
    link_bytes: dict

    @property
    def total_bytes(self) -> int:
        return self.total_payload_bytes + self.total_index_bytes


def simulate_fetch(
    topo: DeviceTopology,
    requests,
    mode: FetchMode,
    bytes_per_row: int = 4,
) -> TrafficStats:
    """Schedule the (merged) requests and account traffic. Completion time is
    the sum over rounds of the slowest link's bytes/bandwidth."""
    transfers = merge_transfers(requests)
    rounds = plan_rounds(topo, transfers)
    link_bytes: dict = defaultdict(int)
    payload_total = 0
    index_total = 0
    syncs = 0
    completion = 0.0
    for rnd in rounds:
        load: dict = defaultdict(int)
        for t in rnd:
            payload = t.num_ids * bytes_per_row
            payload_total += payload
            for e in topo.route(t.src, t.dst):
                load[e] += payload
            if mode is FetchMode.TWO_SIDED:
                idx = t.num_ids * INDEX_BYTES_PER_ID
                index_total += idx
                syncs += 1
                for e in topo.route(t.dst, t.src):
                    load[e] += idx
        for e, b in load.items():
            link_bytes[e] += b
        if load:
            completion += max(b / topo.links[e] for e, b in load.items())
    return TrafficStats(
        num_rounds=len(rounds),
        num_transfers=len(transfers),
        total_payload_bytes=payload_total,
        total_index_bytes=index_total,
        sync_events=syncs,
        completion_time=completion,
        link_bytes=dict(link_bytes),
    )


# ------------------------------------------------------------ partitioning


def partition_features(num_nodes: int, num_devices: int) -> np.ndarray:
    """Contiguous balanced split; the first num_nodes % num_devices devices
    take one extra row. Returns owner[node] -> device."""
    if num_devices < 1:
        raise ValueError("need at least one device")
    base = num_nodes // num_devices
    extra = num_nodes % num_devices
    sizes = [base + (1 if i < extra else 0) for i in range(num_devices)]
    return np.repeat(np.arange(num_devices), sizes)


def requests_for_batch(owner: np.ndarray, ids, requester: int) -> list[Transfer]:
    """One transfer per remote device owning any of the requested rows."""
    ids = np.asarray(ids)
    owners = owner[ids]
    out = []
    for dev in np.unique(owners):
        if dev == requester:
            continue
        out.append(Transfer(int(dev), requester, int((owners == dev).sum())))
    return out
