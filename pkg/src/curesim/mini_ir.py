"""Mini-IR: a small typed, register-based IR with a line-oriented text format.

The grammar is documented in docs/ir.md.  `parse_program` returns a
validated `Program`; `format_program` prints one back.
"""

import re
from dataclasses import dataclass, field, replace
from typing import Optional

# ---------------------------------------------------------------------------
# types


class IrType:
    pass


@dataclass(frozen=True)
class Int8(IrType):
    def __str__(self):
        return "i8"


@dataclass(frozen=True)
class Int64(IrType):
    def __str__(self):
        return "i64"


@dataclass(frozen=True)
class Ptr(IrType):
    elem: IrType

    def __str__(self):
        return f"{self.elem}*"


@dataclass(frozen=True)
class Array(IrType):
    elem: IrType
    count: int

    def __str__(self):
        return f"[{self.count} x {self.elem}]"


class Struct(IrType):
    """Named struct.  Identity is the name; fields may be filled in after
    construction so that self-referential pointers work."""

    def __init__(self, name, fields=()):
        self.name = name
        self.fields = tuple(fields)

    def __eq__(self, other):
        return isinstance(other, Struct) and other.name == self.name

    def __hash__(self):
        return hash(("struct", self.name))

    def __repr__(self):
        return f"Struct({self.name!r})"

    def __str__(self):
        return self.name

    def field_index(self, name):
        for i, (fname, _) in enumerate(self.fields):
            if fname == name:
                return i
        raise KeyError(name)


I8 = Int8()
I64 = Int64()


def canonical(t):
    """Canonical type string, used for type ids."""
    if isinstance(t, Struct):
        return f"struct.{t.name}"
    if isinstance(t, Ptr):
        return canonical(t.elem) + "*"
    if isinstance(t, Array):
        return f"[{t.count} x {canonical(t.elem)}]"
    return str(t)


def sizeof(t):
    if isinstance(t, Int8):
        return 1
    if isinstance(t, (Int64, Ptr)):
        return 8
    if isinstance(t, Array):
        return t.count * sizeof(t.elem)
    if isinstance(t, Struct):
        return sum(sizeof(ft) for _, ft in t.fields)
    raise TypeError(f"not a sized type: {t!r}")


def contains_struct(t):
    if isinstance(t, Struct):
        return True
    if isinstance(t, Array):
        return contains_struct(t.elem)
    return False


# ---------------------------------------------------------------------------
# values and instructions


@dataclass(frozen=True)
class Reg:
    name: str

    def __str__(self):
        return f"%{self.name}"


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self):
        return str(self.value)


@dataclass(frozen=True)
class GlobalRef:
    name: str

    def __str__(self):
        return f"@{self.name}"


@dataclass(frozen=True)
class Field:
    index: int

    def __str__(self):
        return f"field {self.index}"


@dataclass(frozen=True)
class Index:
    value: object  # Reg or Imm

    def __str__(self):
        return f"index {self.value}"


class GepError(ValueError):
    pass


def gep_offset(t, path):
    """Byte offset and addressed sub-type of `path` applied inside `t`.

    Index steps must carry integers here (ints or Imm)."""
    if not path:
        raise GepError("gep path invalid: empty path")
    offset = 0
    for step in path:
        if isinstance(step, Field):
            if not isinstance(t, Struct) or not 0 <= step.index < len(t.fields):
                raise GepError("gep path invalid")
            offset += sum(sizeof(ft) for _, ft in t.fields[: step.index])
            t = t.fields[step.index][1]
        else:
            if not isinstance(t, Array):
                raise GepError("gep path invalid")
            idx = step.value if isinstance(step, Index) else step
            idx = idx.value if isinstance(idx, Imm) else idx
            offset += idx * sizeof(t.elem)
            t = t.elem
    return offset, t


def gep_subtype(t, path):
    """Addressed sub-type, ignoring the (possibly dynamic) index values."""
    return gep_offset(t, [Field(s.index) if isinstance(s, Field) else Index(0) for s in path])[1]


OPCODES = (
    "alloca", "malloc", "free", "gep", "padd", "bitcast", "load", "store",
    "mov", "const", "iadd", "isub", "icmp", "br", "brz", "call", "ret",
    "tagd", "xtag", "cstr", "cclr",
)

PREDICATES = ("eq", "ne", "lt", "le", "gt", "ge", "ult", "ule", "ugt", "uge")

# name -> allowed argument counts
INTRINSICS = {
    "input": (1, 2),
    "print": (2,),
    "memfill": (3,),
    "memcpy": (3,),
    "__mutate_ptr": (2,),
    "__scan_clear": (1, 2),
}


@dataclass(frozen=True)
class Instr:
    op: str
    dst: Optional[str] = None
    args: tuple = ()
    ty: Optional[IrType] = None  # alloca/load/store/bitcast/gep element type
    path: tuple = ()  # gep steps
    pred: Optional[str] = None  # icmp
    targets: tuple = ()  # br/brz labels
    callee: Optional[str] = None
    mod: Optional[IrType] = None  # tagd: None means sp, else a type for TypeId
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)

    def uses(self):
        out = [a for a in self.args if isinstance(a, Reg)]
        out += [s.value for s in self.path if isinstance(s, Index) and isinstance(s.value, Reg)]
        return out

    def operands(self):
        return list(self.args) + [s.value for s in self.path if isinstance(s, Index)]


@dataclass
class Block:
    label: str
    instrs: list


@dataclass
class Function:
    name: str
    params: list  # [(name, type or None)]
    blocks: list  # [Block]
    line: int = 0

    def block(self, label):
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    def instructions(self):
        for b in self.blocks:
            for i, ins in enumerate(b.instrs):
                yield b, i, ins


@dataclass
class Global:
    name: str
    ty: IrType
    init: bytes = b""
    external: bool = False


@dataclass
class Program:
    structs: dict
    globals: list
    functions: dict
    entry: str = "main"

    def global_named(self, name):
        for g in self.globals:
            if g.name == name:
                return g
        raise KeyError(name)


# ---------------------------------------------------------------------------
# diagnostics


class IrError(Exception):
    def __init__(self, message, line=0, col=0):
        super().__init__(message)
        self.message = message
        self.line = line
        self.col = col

    def format(self, filename="<input>"):
        return f"{filename}:{self.line}:{self.col}: {self.message}"

    def __str__(self):
        return f"{self.line}:{self.col}: {self.message}"


# ---------------------------------------------------------------------------
# lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>;[^\n]*)
  | (?P<nl>\n)
  | (?P<reg>%[A-Za-z0-9_.$]+)
  | (?P<glob>@[A-Za-z0-9_.$]+)
  | (?P<int>-?0[xX][0-9a-fA-F]+|-?[0-9]+)
  | (?P<str>"(?:[^"\\\n]|\\.)*")
  | (?P<char>'(?:[^'\\\n]|\\.)')
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<punct>[{}()\[\],:=*])
    """,
    re.VERBOSE,
)


@dataclass
class Tok:
    kind: str
    text: str
    line: int
    col: int


def _unescape(body, line, col):
    out = bytearray()
    i = 0
    while i < len(body):
        c = body[i]
        if c != "\\":
            out += c.encode("utf-8")
            i += 1
            continue
        nxt = body[i + 1 : i + 3]
        if len(nxt) == 2 and all(ch in "0123456789abcdefABCDEF" for ch in nxt):
            out.append(int(nxt, 16))
            i += 3
        elif body[i + 1 : i + 2] in ("\\", '"', "'"):
            out += body[i + 1].encode()
            i += 2
        elif body[i + 1 : i + 2] == "n":
            out.append(10)
            i += 2
        else:
            raise IrError("bad escape in string", line, col)
    return bytes(out)


def tokenize(text):
    toks = []
    line, line_start = 1, 0
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise IrError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        col = pos - line_start + 1
        if kind == "nl":
            toks.append(Tok("nl", "\n", line, col))
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            toks.append(Tok(kind, m.group(), line, col))
        pos = m.end()
    toks.append(Tok("eof", "", line, pos - line_start + 1))
    return toks


def _parse_int(text):
    neg = text.startswith("-")
    body = text[1:] if neg else text
    v = int(body, 16) if body[:2].lower() == "0x" else int(body)
    return -v if neg else v


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, text):
        self.toks = tokenize(text)
        self.pos = 0
        self.structs = {}

    # token helpers
    def peek(self, k=0):
        return self.toks[min(self.pos + k, len(self.toks) - 1)]

    def next(self):
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def error(self, msg, tok=None):
        tok = tok or self.peek()
        return IrError(msg, tok.line, tok.col)

    def at(self, kind, text=None):
        t = self.peek()
        return t.kind == kind and (text is None or t.text == text)

    def expect(self, kind, text=None):
        t = self.peek()
        if not self.at(kind, text):
            want = text or kind
            got = t.text if t.kind != "nl" else "end of line"
            raise self.error(f"expected {want!r}, got {got!r}")
        return self.next()

    def accept(self, kind, text=None):
        if self.at(kind, text):
            return self.next()
        return None

    def skip_nl(self):
        while self.at("nl"):
            self.next()

    def end_of_stmt(self):
        if self.at("nl") or self.at("eof"):
            self.skip_nl()
            return
        if self.at("punct", "}"):
            return
        raise self.error(f"unexpected {self.peek().text!r}")

    # program
    def parse(self):
        # pre-declare struct names so types may refer forward
        for i, t in enumerate(self.toks):
            if t.kind == "ident" and t.text == "struct" and self.toks[i + 1].kind == "ident":
                name = self.toks[i + 1].text
                if name in self.structs:
                    raise IrError(f"duplicate struct {name}", t.line, t.col)
                self.structs[name] = Struct(name)
        globals_, functions, entry = [], {}, None
        defined_structs = set()
        self.skip_nl()
        while not self.at("eof"):
            t = self.peek()
            if self.at("ident", "struct"):
                name = self.parse_struct()
                defined_structs.add(name)
            elif self.at("ident", "global") or self.at("ident", "extern"):
                g = self.parse_global()
                if any(x.name == g.name for x in globals_):
                    raise self.error(f"duplicate global @{g.name}", t)
                globals_.append(g)
            elif self.at("ident", "func"):
                fn = self.parse_function()
                if fn.name in functions:
                    raise IrError(f"duplicate function @{fn.name}", t.line, t.col)
                if fn.name in INTRINSICS:
                    raise IrError(f"function @{fn.name} shadows an intrinsic", t.line, t.col)
                functions[fn.name] = fn
            elif self.at("ident", "entry"):
                self.next()
                entry = self.expect("glob").text[1:]
                self.end_of_stmt()
            else:
                raise self.error(f"unexpected {t.text!r} at top level")
            self.skip_nl()
        return Program(self.structs, globals_, functions, entry or "main")

    def parse_struct(self):
        self.expect("ident", "struct")
        name = self.expect("ident").text
        self.expect("punct", "{")
        fields = []
        self.skip_nl()
        while not self.at("punct", "}"):
            fname_tok = self.expect("ident")
            self.expect("punct", ":")
            ft = self.parse_type()
            if any(f == fname_tok.text for f, _ in fields):
                raise self.error(f"duplicate field {fname_tok.text}", fname_tok)
            fields.append((fname_tok.text, ft))
            self.skip_nl()
            if not self.accept("punct", ","):
                self.skip_nl()
                break
            self.skip_nl()
        self.expect("punct", "}")
        self.end_of_stmt()
        self.structs[name].fields = tuple(fields)
        return name

    def parse_type(self):
        t = self.peek()
        if self.accept("punct", "["):
            count = _parse_int(self.expect("int").text)
            if count < 0:
                raise self.error("negative array length", t)
            self.expect("ident", "x")
            elem = self.parse_type()
            self.expect("punct", "]")
            ty = Array(elem, count)
        elif t.kind == "ident":
            self.next()
            if t.text == "i8":
                ty = I8
            elif t.text == "i64":
                ty = I64
            elif t.text in self.structs:
                ty = self.structs[t.text]
            else:
                raise IrError(f"undefined type {t.text}", t.line, t.col)
        else:
            raise self.error("expected a type")
        while self.accept("punct", "*"):
            ty = Ptr(ty)
        return ty

    def parse_global(self):
        external = bool(self.accept("ident", "extern"))
        self.expect("ident", "global")
        name = self.expect("glob").text[1:]
        self.expect("punct", ":")
        ty = self.parse_type()
        init = b""
        if self.accept("punct", "="):
            t = self.peek()
            if t.kind == "str":
                self.next()
                init = _unescape(t.text[1:-1], t.line, t.col)
            elif t.kind == "int":
                self.next()
                init = (_parse_int(t.text) & ((1 << 64) - 1)).to_bytes(8, "little")[: max(1, min(8, sizeof(ty)))]
            elif self.accept("ident", "zeroinit"):
                pass
            else:
                raise self.error("expected initializer")
            if len(init) > sizeof(ty):
                raise self.error(f"initializer for @{name} larger than its type", t)
        self.end_of_stmt()
        return Global(name, ty, init, external)

    def parse_function(self):
        head = self.expect("ident", "func")
        name = self.expect("glob").text[1:]
        self.expect("punct", "(")
        params = []
        while not self.at("punct", ")"):
            p = self.expect("reg").text[1:]
            pty = None
            if self.accept("punct", ":"):
                pty = self.parse_type()
            if any(q == p for q, _ in params):
                raise self.error(f"duplicate parameter %{p}")
            params.append((p, pty))
            if not self.accept("punct", ","):
                break
        self.expect("punct", ")")
        self.skip_nl()
        self.expect("punct", "{")
        self.skip_nl()
        blocks = []
        cur = None
        while not self.at("punct", "}"):
            if self.at("eof"):
                raise self.error(f"unterminated function @{name}")
            if self.at("ident") and self.peek(1).kind == "punct" and self.peek(1).text == ":":
                lab = self.next()
                self.next()
                if any(b.label == lab.text for b in blocks):
                    raise self.error(f"duplicate label {lab.text}", lab)
                cur = Block(lab.text, [])
                blocks.append(cur)
                self.skip_nl()
                continue
            if cur is None:
                cur = Block("entry", [])
                blocks.append(cur)
            cur.instrs.append(self.parse_instr())
            self.end_of_stmt()
        self.expect("punct", "}")
        self.end_of_stmt()
        if not blocks:
            blocks.append(Block("entry", []))
        return Function(name, params, blocks, head.line)

    def parse_value(self):
        t = self.peek()
        if t.kind == "reg":
            self.next()
            return Reg(t.text[1:])
        if t.kind == "glob":
            self.next()
            return GlobalRef(t.text[1:])
        if t.kind == "int":
            self.next()
            return Imm(_parse_int(t.text))
        if t.kind == "char":
            self.next()
            b = _unescape(t.text[1:-1], t.line, t.col)
            return Imm(b[0])
        raise self.error("expected a value")

    def parse_path(self):
        steps = []
        while True:
            t = self.peek()
            if self.accept("ident", "field"):
                steps.append(Field(_parse_int(self.expect("int").text)))
            elif self.accept("ident", "index"):
                steps.append(Index(self.parse_value()))
            else:
                raise self.error("expected 'field' or 'index'", t)
            if not self.accept("punct", ","):
                return tuple(steps)

    def parse_instr(self):
        first = self.peek()
        dst = None
        if first.kind == "reg" and self.peek(1).kind == "punct" and self.peek(1).text == "=":
            dst = self.next().text[1:]
            self.next()
        optok = self.expect("ident")
        op = optok.text
        loc = dict(line=optok.line, col=optok.col)
        if op not in OPCODES:
            raise IrError(f"unknown opcode {op!r}", optok.line, optok.col)
        with_dst = {"alloca", "malloc", "gep", "padd", "bitcast", "load", "mov", "const",
                    "iadd", "isub", "icmp", "tagd", "xtag"}
        no_dst = {"free", "store", "br", "brz", "ret", "cstr", "cclr"}
        if op in with_dst and dst is None:
            raise IrError(f"{op} needs a destination register", optok.line, optok.col)
        if op in no_dst and dst is not None:
            raise IrError(f"{op} does not produce a value", first.line, first.col)
        v = self.parse_value
        if op == "alloca":
            return Instr(op, dst, ty=self.parse_type(), **loc)
        if op in ("malloc", "free", "mov", "xtag", "cclr"):
            return Instr(op, dst, (v(),), **loc)
        if op == "const":
            t = self.peek()
            val = v()
            if not isinstance(val, Imm):
                raise IrError("const needs an integer", t.line, t.col)
            return Instr(op, dst, (val,), **loc)
        if op == "gep":
            ty = None
            if not (self.at("reg") or self.at("glob")):
                ty = self.parse_type()
                self.expect("punct", ",")
            base = v()
            self.expect("punct", ",")
            return Instr(op, dst, (base,), ty=ty, path=self.parse_path(), **loc)
        if op in ("padd", "iadd", "isub", "cstr"):
            a = v()
            self.expect("punct", ",")
            return Instr(op, dst, (a, v()), **loc)
        if op == "bitcast":
            a = v()
            self.expect("ident", "to")
            return Instr(op, dst, (a,), ty=self.parse_type(), **loc)
        if op == "load":
            ty = self.parse_type()
            self.expect("punct", ",")
            return Instr(op, dst, (v(),), ty=ty, **loc)
        if op == "store":
            ty = self.parse_type()
            a = v()
            self.expect("punct", ",")
            return Instr(op, None, (a, v()), ty=ty, **loc)
        if op == "icmp":
            pt = self.expect("ident")
            if pt.text not in PREDICATES:
                raise IrError(f"unknown predicate {pt.text!r}", pt.line, pt.col)
            a = v()
            self.expect("punct", ",")
            return Instr(op, dst, (a, v()), pred=pt.text, **loc)
        if op == "br":
            return Instr(op, targets=(self.expect("ident").text,), **loc)
        if op == "brz":
            c = v()
            self.expect("punct", ",")
            lz = self.expect("ident").text
            self.expect("punct", ",")
            return Instr(op, None, (c,), targets=(lz, self.expect("ident").text), **loc)
        if op == "call":
            callee = self.expect("glob").text[1:]
            self.expect("punct", "(")
            args = []
            while not self.at("punct", ")"):
                args.append(v())
                if not self.accept("punct", ","):
                    break
            self.expect("punct", ")")
            return Instr(op, dst, tuple(args), callee=callee, **loc)
        if op == "ret":
            if self.at("nl") or self.at("eof") or self.at("punct", "}"):
                return Instr(op, **loc)
            return Instr(op, None, (v(),), **loc)
        if op == "tagd":
            a = v()
            self.expect("punct", ",")
            if self.accept("ident", "sp"):
                return Instr(op, dst, (a,), **loc)
            self.expect("ident", "type")
            return Instr(op, dst, (a,), mod=self.parse_type(), **loc)
        raise IrError(f"unhandled opcode {op}", optok.line, optok.col)  # pragma: no cover


# ---------------------------------------------------------------------------
# validation


_ACCESS_TYPES = (Int8, Int64, Ptr)


def infer_pointee_types(program, fn):
    """Flow-insensitive guess of the pointee type of each register."""
    known = {}
    for p, pty in fn.params:
        if isinstance(pty, Ptr):
            known[p] = pty.elem

    def of(val):
        if isinstance(val, Reg):
            return known.get(val.name)
        if isinstance(val, GlobalRef):
            try:
                return program.global_named(val.name).ty
            except KeyError:
                return None
        return None

    changed = True
    while changed:
        changed = False
        for _, _, ins in fn.instructions():
            if ins.dst is None or ins.dst in known:
                continue
            t = None
            if ins.op == "alloca":
                t = ins.ty
            elif ins.op == "malloc":
                t = I8
            elif ins.op == "bitcast" and isinstance(ins.ty, Ptr):
                t = ins.ty.elem
            elif ins.op == "load" and isinstance(ins.ty, Ptr):
                t = ins.ty.elem
            elif ins.op in ("mov", "padd", "tagd", "xtag"):
                t = of(ins.args[0])
            elif ins.op == "gep":
                base_t = ins.ty or of(ins.args[0])
                if base_t is not None:
                    try:
                        t = gep_subtype(base_t, ins.path)
                    except GepError:
                        t = None
            if t is not None:
                known[ins.dst] = t
                changed = True
    return known


def validate(program):
    """Check a parsed program; fills in inferred gep types.  Raises IrError."""
    if program.entry not in program.functions:
        raise IrError(f"entry function @{program.entry} is not defined", 1, 1)
    gnames = {g.name for g in program.globals}
    for fn in program.functions.values():
        defined = {p for p, _ in fn.params}
        labels = {b.label for b in fn.blocks}
        for _, _, ins in fn.instructions():
            if ins.dst:
                defined.add(ins.dst)
        pointee = None
        for bi, block in enumerate(fn.blocks):
            for ii, ins in enumerate(block.instrs):
                def err(msg, ins=ins):
                    return IrError(msg, ins.line, ins.col)

                for val in ins.operands():
                    if isinstance(val, Reg) and val.name not in defined:
                        raise err(f"undefined symbol %{val.name}")
                    if isinstance(val, GlobalRef) and val.name not in gnames:
                        raise err(f"undefined symbol @{val.name}")
                for lab in ins.targets:
                    if lab not in labels:
                        raise err(f"undefined label {lab}")
                if ins.op == "alloca" and bi != 0:
                    raise err("alloca outside the entry block")
                if ins.op in ("load", "store") and not isinstance(ins.ty, _ACCESS_TYPES):
                    raise err(f"cannot {ins.op} a value of type {ins.ty}")
                if ins.op == "call":
                    if ins.callee in INTRINSICS:
                        if len(ins.args) not in INTRINSICS[ins.callee]:
                            raise err(f"wrong number of arguments to @{ins.callee}")
                    elif ins.callee in program.functions:
                        want = len(program.functions[ins.callee].params)
                        if len(ins.args) != want:
                            raise err(f"@{ins.callee} expects {want} arguments, got {len(ins.args)}")
                    else:
                        raise err(f"undefined symbol @{ins.callee}")
                if ins.op == "gep":
                    ty = ins.ty
                    if ty is None:
                        if pointee is None:
                            pointee = infer_pointee_types(program, fn)
                        base = ins.args[0]
                        if isinstance(base, GlobalRef):
                            ty = program.global_named(base.name).ty
                        elif isinstance(base, Reg):
                            ty = pointee.get(base.name)
                        if ty is None:
                            raise err(f"cannot infer the type addressed by {base}")
                    try:
                        gep_subtype(ty, ins.path)
                    except GepError:
                        raise err("gep path invalid") from None
                    if ins.ty is None:
                        block.instrs[ii] = replace(ins, ty=ty)
    return program


def parse_program(text):
    program = _Parser(text).parse()
    return validate(program)


def parse_file(path):
    with open(path, encoding="utf-8") as f:
        return parse_program(f.read())


# ---------------------------------------------------------------------------
# printer


def _escape(data):
    out = []
    for b in data:
        ch = chr(b)
        if 32 <= b < 127 and ch not in '"\\':
            out.append(ch)
        else:
            out.append(f"\\{b:02X}")
    return '"' + "".join(out) + '"'


def format_instr(ins):
    head = f"%{ins.dst} = " if ins.dst else ""
    op, a = ins.op, [str(x) for x in ins.args]
    if op == "alloca":
        body = f"alloca {ins.ty}"
    elif op == "gep":
        steps = ", ".join(str(s) for s in ins.path)
        ty = f"{ins.ty}, " if ins.ty is not None else ""
        body = f"gep {ty}{a[0]}, {steps}"
    elif op == "bitcast":
        body = f"bitcast {a[0]} to {ins.ty}"
    elif op == "load":
        body = f"load {ins.ty}, {a[0]}"
    elif op == "store":
        body = f"store {ins.ty} {a[0]}, {a[1]}"
    elif op == "icmp":
        body = f"icmp {ins.pred} {a[0]}, {a[1]}"
    elif op == "br":
        body = f"br {ins.targets[0]}"
    elif op == "brz":
        body = f"brz {a[0]}, {ins.targets[0]}, {ins.targets[1]}"
    elif op == "call":
        body = f"call @{ins.callee}({', '.join(a)})"
    elif op == "tagd":
        body = f"tagd {a[0]}, " + ("sp" if ins.mod is None else f"type {ins.mod}")
    else:
        body = op + ((" " + ", ".join(a)) if a else "")
    return head + body


def format_program(program):
    lines = []
    for s in program.structs.values():
        fields = ", ".join(f"{n}: {t}" for n, t in s.fields)
        lines.append(f"struct {s.name} {{ {fields} }}")
    if program.structs:
        lines.append("")
    for g in program.globals:
        ext = "extern " if g.external else ""
        init = f" = {_escape(g.init)}" if g.init else ""
        lines.append(f"{ext}global @{g.name} : {g.ty}{init}")
    if program.globals:
        lines.append("")
    if program.entry != "main":
        lines.append(f"entry @{program.entry}")
        lines.append("")
    for fn in program.functions.values():
        params = ", ".join(f"%{p}" + (f": {t}" if t is not None else "") for p, t in fn.params)
        lines.append(f"func @{fn.name}({params}) {{")
        for b in fn.blocks:
            lines.append(f"{b.label}:")
            for ins in b.instrs:
                lines.append("  " + format_instr(ins))
        lines.append("}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# allocation sites


@dataclass(frozen=True)
class Site:
    kind: str  # stack, heap or global
    label: str  # "fn:%reg" for allocas and mallocs, "@name" for globals
    function: Optional[str] = None
    reg: Optional[str] = None


def allocation_sites(program):
    sites = [Site("global", "@" + g.name) for g in program.globals]
    seen = set()
    for fn in program.functions.values():
        for _, _, ins in fn.instructions():
            if ins.op in ("alloca", "malloc"):
                s = Site("stack" if ins.op == "alloca" else "heap", f"{fn.name}:%{ins.dst}", fn.name, ins.dst)
                if s.label not in seen:
                    seen.add(s.label)
                    sites.append(s)
    return sites
