"""Newline-delimited JSON bridge to an external traffic simulator.

The simulator (client) sends one ``counts`` message per control instant and
waits for the ``signals`` reply::

    {"version": 1, "type": "counts", "t": 60,
     "q": [[from, to, count], ...],
     "exited": [[from, to, departures], ...],        # optional, since last instant
     "turns": [[from, via, to, vehicles], ...]}      # optional, online turning mode
    {"version": 1, "type": "signals", "t": 60, "sigma": [[intersection, 1], ...]}

A ``{"version": 1, "type": "close"}`` message, or end of stream, ends the
session cleanly.  Anything malformed is answered with an ``error`` message
and the session stops.  Roads absent from ``q`` count as empty.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import sys
import threading
from dataclasses import dataclass
from typing import Callable, TextIO

import numpy as np

from ..control import ControllerConfig
from ..mesosim import SimConfig, Simulator
from ..network import RoadNetwork
from .experiment import RunResult
from .session import ControlSession

PROTOCOL_VERSION = 1
log = logging.getLogger(__name__)


class ProtocolError(Exception):
    pass


class PeerTimeout(ProtocolError):
    pass


class LineChannel:
    """Line-oriented duplex channel over text streams with a receive timeout.

    A daemon thread drains the input stream so that a blocked ``readline``
    never outlives the timeout on the caller's side.
    """

    def __init__(self, reader: TextIO, writer: TextIO, timeout: float | None = None):
        self.writer = writer
        self.timeout = timeout
        self._lines: queue.Queue = queue.Queue()
        threading.Thread(target=self._pump, args=(reader,), daemon=True).start()

    def _pump(self, reader: TextIO) -> None:
        try:
            for line in reader:
                self._lines.put(line)
        except (OSError, ValueError):
            pass
        self._lines.put(None)  # end of stream

    def recv(self) -> str | None:
        try:
            return self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise PeerTimeout(f"no message within {self.timeout} s") from None

    def send(self, obj: dict) -> None:
        self.writer.write(json.dumps(obj, separators=(",", ":")) + "\n")
        self.writer.flush()

    def request(self, obj: dict) -> dict:
        self.send(obj)
        line = self.recv()
        if line is None:
            raise ProtocolError("peer closed the connection")
        return json.loads(line)


def _road_table(net: RoadNetwork, field: str, entries, columns: int = 3) -> np.ndarray:
    if not isinstance(entries, list):
        raise ProtocolError(f"'{field}' must be a list")
    out = np.zeros(net.n_roads)
    for k, item in enumerate(entries):
        if not (isinstance(item, list) and len(item) == columns):
            raise ProtocolError(f"{field}[{k}] must be a list of {columns} numbers")
        src, dst, value = item
        road = net.road_index.get((src, dst))
        if road is None:
            raise ProtocolError(f"{field}[{k}]: no road from {src!r} to {dst!r}")
        if not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0:
            raise ProtocolError(f"{field}[{k}]: count must be a non-negative number")
        out[road] += value
    return out


def _turn_list(net: RoadNetwork, entries) -> list[tuple[int, int]]:
    if not isinstance(entries, list):
        raise ProtocolError("'turns' must be a list")
    moves = []
    for k, item in enumerate(entries):
        if not (isinstance(item, list) and len(item) == 4):
            raise ProtocolError(f"turns[{k}] must be [from, via, to, vehicles]")
        a, b, c, n = item
        up, down = net.road_index.get((a, b)), net.road_index.get((b, c))
        if up is None or down is None or not isinstance(n, int) or n < 0:
            raise ProtocolError(f"turns[{k}]: invalid move {item!r}")
        moves.extend([(up, down)] * n)
    return moves


@dataclass
class CountsMessage:
    t: int
    counts: np.ndarray
    exited: np.ndarray | None
    transitions: list[tuple[int, int]] | None


def parse_counts(net: RoadNetwork, msg) -> CountsMessage | None:
    """Validate one decoded message; ``None`` means the peer asked to close."""
    if not isinstance(msg, dict):
        raise ProtocolError("message must be a JSON object")
    if msg.get("version") != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported or missing version {msg.get('version')!r}")
    kind = msg.get("type")
    if kind == "close":
        return None
    if kind != "counts":
        raise ProtocolError(f"unexpected message type {kind!r}")
    t = msg.get("t")
    if not isinstance(t, int) or isinstance(t, bool) or t < 0:
        raise ProtocolError("'t' must be a non-negative integer")
    if "q" not in msg:
        raise ProtocolError("missing 'q'")
    counts = _road_table(net, "q", msg["q"])
    reported = {tuple(item[:2]) for item in msg["q"]}
    missing = len(net.roads) - len(reported)
    if missing:
        log.warning("t=%d: %d road(s) missing from counts, treated as empty", t, missing)
    exited = _road_table(net, "exited", msg["exited"]) if "exited" in msg else None
    turns = _turn_list(net, msg["turns"]) if "turns" in msg else None
    return CountsMessage(t, counts, exited, turns)


def serve(net: RoadNetwork, config: ControllerConfig, channel: LineChannel, prior_flow: float,
          routes=None, turning: str = "routes") -> ControlSession:
    """Controller side: answer counts with signal states until the peer closes.

    Raises :class:`ProtocolError` after replying with an error message.
    """
    session = ControlSession(net, config, prior_flow, routes=routes, turning=turning)
    ids = [net.intersections[i].id for i in net.controlled]
    while True:
        t = None
        try:
            line = channel.recv()
            if line is None:
                return session
            try:
                msg = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"invalid JSON: {exc}") from None
            parsed = parse_counts(net, msg)
            if parsed is None:
                return session
            t = parsed.t
            if session.t_last is not None and t <= session.t_last:
                raise ProtocolError(f"timestamp {t} does not advance past {session.t_last}")
            sigma = session.update(t, parsed.counts, parsed.exited, parsed.transitions)
            channel.send({"version": PROTOCOL_VERSION, "type": "signals", "t": t,
                          "sigma": [[i, int(s)] for i, s in zip(ids, sigma)]})
        except ProtocolError as exc:
            try:
                channel.send({"version": PROTOCOL_VERSION, "type": "error", "t": t,
                              "message": str(exc)})
            except OSError:
                pass
            raise


def _close_socket(sock: socket.socket, *files) -> None:
    # shut down first: it wakes the pump thread, which holds the reader's lock
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    for f in files:
        try:
            f.close()
        except OSError:
            pass
    sock.close()


def serve_stdio(net: RoadNetwork, config: ControllerConfig, prior_flow: float,
                timeout: float | None = None, **kw) -> ControlSession:
    return serve(net, config, LineChannel(sys.stdin, sys.stdout, timeout), prior_flow, **kw)


def serve_tcp(net: RoadNetwork, config: ControllerConfig, prior_flow: float, host: str = "127.0.0.1",
              port: int = 0, timeout: float | None = None,
              on_listen: Callable[[int], None] | None = None, **kw) -> ControlSession:
    """Accept one simulator connection and serve it."""
    with socket.create_server((host, port)) as srv:
        if on_listen:
            on_listen(srv.getsockname()[1])
        srv.settimeout(timeout)
        try:
            conn, _ = srv.accept()
        except socket.timeout:
            raise PeerTimeout(f"no simulator connected within {timeout} s") from None
        rf, wf = conn.makefile("r"), conn.makefile("w")
        try:
            return serve(net, config, LineChannel(rf, wf, timeout), prior_flow, **kw)
        finally:
            _close_socket(conn, wf, rf)


def counts_message(net: RoadNetwork, t: int, counts, exited=None, transitions=None) -> dict:
    """Client-side encoder for one control instant."""
    roads = net.roads
    msg = {"version": PROTOCOL_VERSION, "type": "counts", "t": int(t),
           "q": [[r.src, r.dst, int(c)] for r, c in zip(roads, counts)]}
    if exited is not None:
        msg["exited"] = [[r.src, r.dst, int(c)] for r, c in zip(roads, exited)]
    if transitions is not None:
        tally: dict[tuple[int, int], int] = {}
        for up, down in transitions:
            tally[up, down] = tally.get((up, down), 0) + 1
        msg["turns"] = [[roads[u].src, roads[u].dst, roads[d].dst, n] for (u, d), n in sorted(tally.items())]
    return msg


def drive_simulator(net: RoadNetwork, sim_config: SimConfig, tau: int, channel: LineChannel,
                    turning: str = "routes", sim: Simulator | None = None) -> RunResult:
    """Client side: run mesosim and obtain signal states through the protocol."""
    sim = sim or Simulator(net, sim_config)
    pos = {net.intersections[i].id: k for k, i in enumerate(net.controlled)}
    sigma = np.ones(net.n_controlled, dtype=np.int64)
    exited = np.zeros(net.n_roads, dtype=np.int64)
    moves: list = []
    rows = []
    for t in range(int(sim_config.duration)):
        if t % tau == 0:
            reply = channel.request(counts_message(net, t, sim.observe().counts, exited,
                                                   moves if turning == "online" else None))
            if reply.get("type") != "signals" or reply.get("t") != t:
                raise ProtocolError(f"unexpected reply {reply!r}")
            for ident, s in reply["sigma"]:
                sigma[pos[ident]] = s
            exited = np.zeros(net.n_roads, dtype=np.int64)
            moves = []
        res = sim.step(sigma)
        exited += res.departures
        if turning == "online":
            moves.extend(res.transitions)
        rows.append(res.metrics)
    channel.send({"version": PROTOCOL_VERSION, "type": "close"})
    return RunResult(sim_config.seed, rows, [])


def loopback_run(net: RoadNetwork, sim_config: SimConfig, ctrl_config: ControllerConfig,
                 turning: str = "routes", timeout: float | None = 60.0) -> tuple[RunResult, ControlSession]:
    """Drive mesosim against a controller thread over a local socket pair."""
    sim = Simulator(net, sim_config, Q=ctrl_config.Q)
    a, b = socket.socketpair()
    result: dict = {}

    def controller_side():
        rf, wf = b.makefile("r"), b.makefile("w")
        try:
            result["session"] = serve(net, ctrl_config, LineChannel(rf, wf, timeout),
                                      sim_config.saturation_flow, routes=sim.routes, turning=turning)
        except ProtocolError as exc:
            result["error"] = exc
        finally:
            _close_socket(b, wf, rf)

    worker = threading.Thread(target=controller_side, daemon=True)
    worker.start()
    rf, wf = a.makefile("r"), a.makefile("w")
    try:
        run = drive_simulator(net, sim_config, ctrl_config.tau, LineChannel(rf, wf, timeout),
                              turning=turning, sim=sim)
        worker.join(timeout)
    finally:
        _close_socket(a, wf, rf)
    if "error" in result:
        raise result["error"]
    session = result["session"]
    run.solve_times = list(session.solve_times)
    return run, session
