"""Static points-to graph and taint analysis that selects which allocation
sites need DPT.

Values are ``(function, register)`` pairs; a global's address is
``("@", name)``.  Each allocation site owns one root node.  Successor nodes
hang off a node by gep path (struct fields keep their index, array indices
collapse to ``*``) or by bitcast type.  Every node may have a memory node
holding the values stored into / loaded from the object it describes.
"""

import json
from collections import deque
from dataclasses import dataclass, field

from .mini_ir import INTRINSICS, Field, GlobalRef, Reg, allocation_sites

DEFAULT_SOURCES = {"input": (0,)}
_JOIN_OPS = ("mov", "padd", "iadd", "isub", "tagd", "xtag")


@dataclass
class Node:
    id: int
    root: str
    key: tuple
    aliases: set = field(default_factory=set)
    succ: dict = field(default_factory=dict)
    mem: int = None
    tainted: bool = False


def _value(fn, v):
    if isinstance(v, Reg):
        return (fn, v.name)
    if isinstance(v, GlobalRef):
        return ("@", v.name)
    return None


def _fmt(v):
    return f"@{v[1]}" if v[0] == "@" else f"{v[0]}:%{v[1]}"


def _path_key(path):
    return tuple(("f", s.index) if isinstance(s, Field) else ("i", "*") for s in path)


class _Index:
    """Use lists of every value in the program."""

    def __init__(self, program):
        self.program = program
        self.users = {}  # value -> [(fn, ins)]
        self.callsites = {}  # callee -> [(fn, ins)]
        self.rets = {}  # fn -> [ins]
        for fname, fn in program.functions.items():
            for _, _, ins in fn.instructions():
                for v in ins.operands():
                    key = _value(fname, v)
                    if key is not None:
                        self.users.setdefault(key, []).append((fname, ins))
                if ins.op == "call":
                    self.callsites.setdefault(ins.callee, []).append((fname, ins))
                if ins.op == "ret" and ins.args:
                    self.rets.setdefault(fname, []).append(ins)

    def uses(self, v):
        return self.users.get(v, ())


class PointsToGraph:
    def __init__(self, program):
        self.program = program
        self.index = _Index(program)
        self.nodes = []
        self.roots = {}  # site label -> node id
        self.sites = {}  # site label -> Site
        self.in_root = {}  # (root, value) -> node id
        self.value_nodes = {}  # value -> set of node ids

    def _new(self, root, key):
        n = Node(len(self.nodes), root, key)
        self.nodes.append(n)
        return n

    def add(self, node, v):
        """Put v in node's alias set unless the root already holds it."""
        k = (node.root, v)
        if k in self.in_root:
            return False
        self.in_root[k] = node.id
        node.aliases.add(v)
        self.value_nodes.setdefault(v, set()).add(node.id)
        return True

    def succ(self, node, key):
        nid = node.succ.get(key)
        if nid is None:
            nid = self._new(node.root, key).id
            node.succ[key] = nid
        return self.nodes[nid]

    def mem(self, node):
        if node.mem is None:
            node.mem = self._new(node.root, ("mem",)).id
        return self.nodes[node.mem]

    def nodes_of(self, v):
        return [self.nodes[i] for i in sorted(self.value_nodes.get(v, ()))]

    def roots_of(self, fn, reg):
        """Labels of allocation sites whose subgraph contains (fn, reg)."""
        return {self.nodes[i].root for i in self.value_nodes.get((fn, reg), ())}

    def closure(self, root_label):
        out, todo = [], [self.roots[root_label]]
        seen = set()
        while todo:
            nid = todo.pop()
            if nid in seen:
                continue
            seen.add(nid)
            out.append(self.nodes[nid])
            todo.extend(self.nodes[nid].succ.values())
        return out

    def to_dict(self):
        return {
            "roots": {label: nid for label, nid in sorted(self.roots.items())},
            "nodes": [
                {
                    "id": n.id,
                    "root": n.root,
                    "key": [list(k) if isinstance(k, tuple) else k for k in n.key],
                    "aliases": sorted(_fmt(v) for v in n.aliases),
                    "succ": {json.dumps(k): nid for k, nid in sorted(n.succ.items(), key=lambda kv: kv[1])},
                    "mem": n.mem,
                    "tainted": n.tainted,
                }
                for n in self.nodes
            ],
        }


def build_points_to(program):
    g = PointsToGraph(program)
    for site in allocation_sites(program):
        root = g._new(site.label, ("root",))
        g.roots[site.label] = root.id
        g.sites[site.label] = site
        g.add(root, ("@", site.label[1:]) if site.kind == "global" else (site.function, site.reg))
    # the store-through rule depends on other roots' subgraphs, so iterate
    while True:
        before = len(g.in_root), len(g.nodes)
        for label in g.roots:
            _traverse_root(g, label)
        if (len(g.in_root), len(g.nodes)) == before:
            return g


def _traverse_root(g, label):
    idx = g.index
    program = g.program
    root = g.nodes[g.roots[label]]
    visited = set()
    work = [(root.id, v) for v in sorted(root.aliases)]
    while work:
        nid, v = work.pop()
        if v in visited:
            continue
        visited.add(v)
        node = g.nodes[nid]

        def link(target, value):
            g.add(target, value)
            if g.in_root.get((target.root, value)) == target.id:
                work.append((target.id, value))

        for fname, ins in idx.uses(v):
            op = ins.op
            first = _value(fname, ins.args[0]) if ins.args else None
            if op == "gep" and first == v:
                link(g.succ(node, ("gep",) + _path_key(ins.path)), (fname, ins.dst))
            elif op == "bitcast":
                link(g.succ(node, ("cast", str(ins.ty))), (fname, ins.dst))
            elif op in _JOIN_OPS:
                link(node, (fname, ins.dst))
            elif op == "load":
                link(g.mem(node), (fname, ins.dst))
            elif op == "store":
                val, ptr = (_value(fname, a) for a in ins.args)
                if ptr == v and val is not None:
                    link(g.mem(node), val)
                if val == v and ptr is not None:
                    # anything loaded through an alias of ptr may be v again
                    for other in g.nodes_of(ptr):
                        g.add(g.mem(other), v)
                        for a in sorted(other.aliases):
                            for f2, u in idx.uses(a):
                                if u.op == "load" and _value(f2, u.args[0]) == a:
                                    link(node, (f2, u.dst))
            elif op == "call" and ins.callee in program.functions:
                params = program.functions[ins.callee].params
                for a, (pname, _) in zip(ins.args, params):
                    if _value(fname, a) == v:
                        link(node, (ins.callee, pname))
            elif op == "ret":
                for f2, call in idx.callsites.get(fname, ()):
                    if call.dst:
                        link(node, (f2, call.dst))


def propagate_taint(g, sources=None):
    """Mark tainted nodes.  Returns the set of data-tainted values."""
    sources = DEFAULT_SOURCES if sources is None else sources
    program, idx = g.program, g.index
    work = deque()
    for fname, fn in program.functions.items():
        for _, _, ins in fn.instructions():
            if ins.op == "call" and ins.callee in sources:
                for pos in sources[ins.callee]:
                    if pos < len(ins.args):
                        v = _value(fname, ins.args[pos])
                        work.extend(("node", n.id) for n in g.nodes_of(v))
    for gl in program.globals:
        if gl.external:
            work.append(("node", g.roots["@" + gl.name]))

    data = set()
    while work:
        kind, item = work.popleft()
        if kind == "node":
            node = g.nodes[item]
            if node.tainted:
                continue
            node.tainted = True
            # bytes written into an object are visible through any field of it
            work.extend(("node", c) for k, c in sorted(node.succ.items()) if k[0] == "gep")
            for a in sorted(node.aliases):
                work.extend(("node", n.id) for n in g.nodes_of(a) if not n.tainted)
                for fname, u in idx.uses(a):
                    if u.op == "load" and _value(fname, u.args[0]) == a:
                        work.append(("data", (fname, u.dst)))
                    elif u.op == "call" and u.callee == "memcpy" and _value(fname, u.args[1]) == a:
                        work.extend(("node", n.id) for n in g.nodes_of(_value(fname, u.args[0])))
            continue
        v = item
        if v in data:
            continue
        data.add(v)
        for fname, u in idx.uses(v):
            op = u.op
            if op == "store":
                val, ptr = (_value(fname, a) for a in u.args)
                if val == v and ptr is not None:
                    for n in g.nodes_of(ptr):
                        work.append(("node", n.id))
                        work.append(("node", g.mem(n).id))
            elif op == "gep":
                work.extend(("node", n.id) for n in g.nodes_of((fname, u.dst)))
                work.append(("data", (fname, u.dst)))
            elif op == "call":
                if u.callee in program.functions:
                    for a, (pname, _) in zip(u.args, program.functions[u.callee].params):
                        if _value(fname, a) == v:
                            work.append(("data", (u.callee, pname)))
                elif u.callee in INTRINSICS and u.dst:
                    work.append(("data", (fname, u.dst)))
            elif op == "ret":
                for f2, call in idx.callsites.get(fname, ()):
                    if call.dst:
                        work.append(("data", (f2, call.dst)))
            elif u.dst:
                work.append(("data", (fname, u.dst)))
    return data


def select_protected(g):
    """Site labels whose root subgraph reaches a tainted node."""
    return {label for label in g.roots if any(n.tainted for n in g.closure(label))}


def analyze(program, sources=None):
    g = build_points_to(program)
    propagate_taint(g, sources)
    return g, select_protected(g)
