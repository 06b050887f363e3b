"""The DPT compiler pass.

DPT-H protects heap objects, DPT-C adds stack and global objects, DPT-F adds
sub-objects reached through struct field geps.  A `ProtectionPlan` may
restrict the allocation sites (see the taint module); without one every site
of the enabled kinds is protected.
"""

from dataclasses import dataclass, replace
from typing import Optional

from .mini_ir import (
    Block, Field, Function, GlobalRef, Imm, Index, Instr, Program, Reg,
    allocation_sites, contains_struct, gep_subtype, sizeof,
)

MODE_KINDS = {
    "off": frozenset(),
    "dpt-h": frozenset({"heap"}),
    "dpt-c": frozenset({"heap", "stack", "global"}),
    "dpt-f": frozenset({"heap", "stack", "global"}),
}


@dataclass(frozen=True)
class ProtectionPlan:
    mode: str = "dpt-f"
    sites: Optional[frozenset] = None  # None protects every site

    def protects(self, kind, label):
        return kind in MODE_KINDS[self.mode] and (self.sites is None or label in self.sites)

    @property
    def subobjects(self):
        return self.mode == "dpt-f"

    def protected_sites(self, program):
        return {s.label for s in allocation_sites(program) if self.protects(s.kind, s.label)}


def make_plan(program, mode="dpt-f", taint=False, sources=None):
    """Plan for `mode`; with taint=True only tainted-reachable sites.  Returns (plan, graph)."""
    if not taint:
        return ProtectionPlan(mode), None
    from .taint import analyze

    graph, protected = analyze(program, sources)
    return ProtectionPlan(mode, frozenset(protected)), graph


class _Names:
    def __init__(self, fn):
        self.used = {p for p, _ in fn.params}
        for _, _, ins in fn.instructions():
            if ins.dst:
                self.used.add(ins.dst)

    def fresh(self, base):
        name, n = base, 1
        while name in self.used:
            n += 1
            name = f"{base}{n}"
        self.used.add(name)
        return name


def _rename(ins, mapping):
    if not mapping:
        return ins

    def sub(v):
        if isinstance(v, Reg) and ("%", v.name) in mapping:
            return Reg(mapping[("%", v.name)])
        if isinstance(v, GlobalRef) and ("@", v.name) in mapping:
            return Reg(mapping[("@", v.name)])
        return v

    args = tuple(sub(a) for a in ins.args)
    path = tuple(Index(sub(s.value)) if isinstance(s, Index) else s for s in ins.path)
    if args == ins.args and path == ins.path:
        return ins
    return replace(ins, args=args, path=path)


def _new(op, dst=None, args=(), like=None, **kw):
    loc = dict(line=like.line, col=like.col) if like is not None else {}
    return Instr(op, dst, tuple(args), **kw, **loc)


def _uses_global(fn, name):
    for _, _, ins in fn.instructions():
        if any(isinstance(v, GlobalRef) and v.name == name for v in ins.operands()):
            return True
    return False


def _gep_needs_mutation(fn, ins):
    """True when the gep result is dereferenced or escapes (used other than as a gep base)."""
    for _, _, other in fn.instructions():
        if other is ins:
            continue
        for pos, v in enumerate(other.operands()):
            if isinstance(v, Reg) and v.name == ins.dst:
                if other.op == "gep" and pos == 0:
                    continue
                return True
    return False


def _may_point_to(graph, plan, fn_name, value, kinds):
    if plan.sites is None:
        return True
    if graph is None or not isinstance(value, Reg):
        return False
    for label in graph.roots_of(fn_name, value.name):
        site = graph.sites[label]
        if site.kind in kinds and label in plan.sites:
            return True
    return False


def instrument_function(program, fn, plan, graph=None):
    names = _Names(fn)
    kinds = MODE_KINDS[plan.mode]
    is_entry = fn.name == program.entry
    mapping = {}
    prologue = []

    # globals: shadow + tagd in every function that uses them, cstr in the entry
    if "global" in kinds:
        for g in program.globals:
            if not plan.protects("global", "@" + g.name):
                continue
            if not (is_entry or _uses_global(fn, g.name)):
                continue
            sh = names.fresh(f"{g.name}.dpt")
            mapping[("@", g.name)] = sh
            prologue.append(_new("mov", sh, [GlobalRef(g.name)]))
            prologue.append(_new("tagd", sh, [Reg(sh)], mod=g.ty))
            if is_entry:
                prologue.append(_new("cstr", None, [Reg(sh), Imm(sizeof(g.ty))]))

    # stack objects protected in this function, in allocation order
    shadows = []  # (shadow reg, alloca instr)
    if "stack" in kinds:
        for _, _, ins in fn.instructions():
            if ins.op == "alloca" and plan.protects("stack", f"{fn.name}:%{ins.dst}"):
                sh = names.fresh(f"{ins.dst}.dpt")
                mapping[("%", ins.dst)] = sh
                shadows.append((sh, ins))

    new_blocks = []
    for bi, block in enumerate(fn.blocks):
        out = list(prologue) if bi == 0 else []
        for ins in block.instrs:
            if ins.op == "alloca":
                out.append(ins)
                sh = mapping.get(("%", ins.dst))
                if sh:
                    out.append(_new("mov", sh, [Reg(ins.dst)], like=ins))
                    out.append(_new("tagd", sh, [Reg(sh)], like=ins))
                    out.append(_new("cstr", None, [Reg(sh), Imm(sizeof(ins.ty))], like=ins))
                continue
            ins = _rename(ins, mapping)
            if ins.op == "malloc":
                out.append(ins)
                if plan.protects("heap", f"{fn.name}:%{ins.dst}"):
                    out.append(_new("tagd", ins.dst, [Reg(ins.dst)], like=ins))
                    out.append(_new("cstr", None, [Reg(ins.dst), ins.args[0]], like=ins))
                continue
            if ins.op == "free" and "heap" in kinds and _may_point_to(
                graph, plan, fn.name, ins.args[0], ("heap",)
            ):
                p = ins.args[0]
                if plan.subobjects:
                    out.append(_new("call", None, [p], like=ins, callee="__scan_clear"))
                out.append(_new("cclr", None, [p], like=ins))
                if isinstance(p, Reg):
                    stripped = names.fresh(f"{p.name}.free")
                    out.append(_new("xtag", stripped, [p], like=ins))
                    out.append(replace(ins, args=(Reg(stripped),)))
                else:
                    out.append(ins)
                continue
            if (
                ins.op == "gep"
                and plan.subobjects
                and any(isinstance(s, Field) for s in ins.path)
                and _gep_needs_mutation(fn, ins)
                and _may_point_to(graph, plan, fn.name, ins.args[0], ("heap", "stack", "global"))
            ):
                out.extend(_mutated_gep(ins, names))
                continue
            if ins.op == "ret":
                for sh, alloca in reversed(shadows):
                    if plan.subobjects and contains_struct(alloca.ty):
                        out.append(_new("call", None, [Reg(sh), Imm(sizeof(alloca.ty))], like=ins,
                                        callee="__scan_clear"))
                    out.append(_new("cclr", None, [Reg(sh)], like=ins))
            out.append(ins)
        new_blocks.append(Block(block.label, out))
    last = new_blocks[-1].instrs[-1] if new_blocks[-1].instrs else None
    if shadows and (last is None or last.op not in ("ret", "br", "brz")):
        # falling off the end is an implicit return; make it explicit
        tail = []
        for sh, alloca in reversed(shadows):
            if plan.subobjects and contains_struct(alloca.ty):
                tail.append(_new("call", None, [Reg(sh), Imm(sizeof(alloca.ty))], callee="__scan_clear"))
            tail.append(_new("cclr", None, [Reg(sh)]))
        new_blocks[-1].instrs.extend(tail + [_new("ret")])
    return Function(fn.name, list(fn.params), new_blocks, fn.line)


def _mutated_gep(ins, names):
    """Split at the last field step: mutate the field sub-object, then index inside it."""
    last_field = max(i for i, s in enumerate(ins.path) if isinstance(s, Field))
    prefix, trailing = ins.path[: last_field + 1], ins.path[last_field + 1 :]
    sub_t = gep_subtype(ins.ty, prefix)
    size = Imm(sizeof(sub_t))
    if not trailing:
        return [
            replace(ins, path=prefix),
            _new("call", ins.dst, [Reg(ins.dst), size], like=ins, callee="__mutate_ptr"),
        ]
    sub = names.fresh(f"{ins.dst}.sub")
    return [
        replace(ins, dst=sub, path=prefix),
        _new("call", sub, [Reg(sub), size], like=ins, callee="__mutate_ptr"),
        replace(ins, args=(Reg(sub),), ty=sub_t, path=trailing),
    ]


def instrument(program, plan=None, graph=None):
    """Return an instrumented copy of `program`."""
    plan = plan or ProtectionPlan()
    if plan.mode == "off":
        return program
    functions = {
        name: instrument_function(program, fn, plan, graph) for name, fn in program.functions.items()
    }
    return Program(program.structs, list(program.globals), functions, program.entry)
