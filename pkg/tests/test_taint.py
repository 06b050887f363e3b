import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curesim import MachineConfig, parse_program, run
from curesim.taint import analyze, build_points_to, propagate_taint, select_protected
from corpus import CWE, buggy, corpus, execute, input_of, load

ids = lambda x: getattr(x, "name", "")


def protected(text, sources=None):
    return analyze(parse_program(text), sources)[1]


def test_hello_protects_only_the_input_buffer():
    g, prot = analyze(load(CWE / "hello_overflow.mir"))
    assert prot == {"main:%vulArr"}
    assert any(n.tainted for n in g.closure("main:%vulArr"))
    assert not any(n.tainted for n in g.closure("main:%constArr"))
    assert not any(n.tainted for n in g.closure("@hello"))


def test_gep_successors_collapse_indices():
    g = build_points_to(parse_program(
        "struct S { a: i64, b: [4 x i8] }\nfunc @main() {\n  %s = alloca S\n"
        "  %x = gep S, %s, field 1, index 1\n  %y = gep S, %s, field 1, index 3\n"
        "  %z = gep S, %s, field 0\n  ret 0\n}\n"))
    root = g.nodes[g.roots["main:%s"]]
    keys = sorted(root.succ)
    assert keys == [("gep", ("f", 0)), ("gep", ("f", 1), ("i", "*"))]
    both = g.nodes[root.succ[("gep", ("f", 1), ("i", "*"))]]
    assert both.aliases == {("main", "x"), ("main", "y")}


def test_store_through_pointer_slot():
    text = """
func @main() {
  %buf = alloca [8 x i8]
  %other = alloca [8 x i8]
  %slot = alloca i8*
  %p = gep [8 x i8], %buf, index 0
  store i8* %p, %slot
  %q = load i8*, %slot
  %n = call @input(%q, 8)
  ret 0
}
"""
    assert protected(text) == {"main:%buf"}


def test_taint_through_call_and_return():
    text = """
func @id(%p: i8*) {
  ret %p
}

func @main() {
  %a = malloc 16
  %b = malloc 16
  %c = call @id(%a)
  %n = call @input(%c)
  ret 0
}
"""
    assert protected(text) == {"main:%a"}


def test_tainted_data_stored_into_object():
    text = """
func @main() {
  %in = alloca [4 x i8]
  %cell = malloc 8
  %clean = malloc 8
  %n = call @input(%in, 4)
  %p = gep [4 x i8], %in, index 0
  %v = load i8, %p
  %w = iadd %v, 1
  store i64 %w, %cell
  store i64 1, %clean
  ret 0
}
"""
    assert protected(text) == {"main:%in", "main:%cell"}


def test_memcpy_propagates_to_destination():
    text = """
func @main() {
  %src = alloca [8 x i8]
  %dst = alloca [8 x i8]
  %n = call @input(%src, 8)
  call @memcpy(%dst, %src, 8)
  ret 0
}
"""
    assert protected(text) == {"main:%src", "main:%dst"}


def test_extern_global_is_a_source():
    text = "extern global @env : [8 x i8]\nglobal @mine : [8 x i8]\nfunc @main() {\n  ret 0\n}\n"
    assert protected(text) == {"@env"}


def test_custom_sources():
    text = "func @main() {\n  %a = alloca [4 x i8]\n  %b = alloca [4 x i8]\n  call @print(%b, 4)\n  ret 0\n}\n"
    assert protected(text) == set()
    assert protected(text, {"print": (0,)}) == {"main:%b"}


def test_graph_dump_is_json():
    g, _ = analyze(load(CWE / "so_indirect.mir"))
    d = g.to_dict()
    json.dumps(d)
    assert set(d) == {"roots", "nodes"}
    assert any(n["tainted"] for n in d["nodes"])


SOURCE_CHOICES = [("input", (0,)), ("print", (0,)), ("memfill", (0,)), ("memcpy", (1,)), ("memcpy", (0,))]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([p for p, _ in corpus()]), st.lists(st.sampled_from(SOURCE_CHOICES), max_size=3),
       st.sampled_from(SOURCE_CHOICES))
def test_adding_a_source_never_shrinks(path, base, extra):
    p = load(path)

    def srcs(items):
        out = {}
        for name, pos in items:
            out[name] = tuple(sorted(set(out.get(name, ())) | set(pos)))
        return out

    small = analyze(p, srcs(base))[1]
    large = analyze(p, srcs(base + [extra]))[1]
    assert small <= large


@pytest.mark.parametrize("path, expect", corpus(), ids=ids)
def test_static_plan_covers_dynamic_provenance(path, expect):
    p = load(path)
    _, prot = analyze(p)
    r = run(p, MachineConfig(enable_dpt=False, mode="off", input=input_of(expect), track_taint=True))
    assert r.machine.tainted_sites <= prot


def test_dynamic_oracle_sees_input_sites():
    p = load(CWE / "so_indirect.mir")
    r = run(p, MachineConfig(enable_dpt=False, mode="off", input=b"A" * 17, track_taint=True))
    assert r.machine.tainted_sites == {"main:%a"}


@pytest.mark.parametrize("path, expect", [(p, e) for p, e in buggy() if "protected" in e], ids=ids)
def test_selective_keeps_tainted_detections(path, expect):
    p = load(path)
    data = input_of(expect)
    full = execute(p, "dpt-f", data)
    sel = execute(p, "dpt-f", data, taint=True)
    key = lambda v: (v.kind, v.function, v.line)
    assert full.violations
    assert {key(v) for v in full.violations} <= {key(v) for v in sel.violations}


def test_selective_skips_untainted_bugs():
    # no input reaches this overflow, so selective DPT leaves the buffer alone
    p = load(CWE / "so_loop.mir")
    assert analyze(p)[1] == set()
    assert execute(p, "dpt-f", taint=True).violations == []


def test_propagation_idempotent():
    p = load(CWE / "hello_overflow.mir")
    g = build_points_to(p)
    propagate_taint(g)
    first = select_protected(g)
    propagate_taint(g)
    assert select_protected(g) == first
