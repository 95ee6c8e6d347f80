"""Static dependency scanner for R and Python scripts.

A hand-written tokenizer feeds a shallow grammar that recognises package
loading statements, function definitions and call sites.  Nothing inside a
comment or a string literal can contribute a dependency because those are
single tokens by the time the grammar looks at them.

Recognised surface:

* R: ``library(x)``, ``require(x)``, ``requireNamespace("x")``, ``x::f``,
  ``x:::f``, ``name <- function(...)``, ``name = function(...)``
* Python: ``import a.b as c``, ``from a.b import c`` (relative imports are
  local), ``def name(...)``
* both: ``identifier(`` is a call unless the identifier is a keyword
"""

import keyword
import re
import sys
from dataclasses import dataclass, field
from enum import Enum
from typing import FrozenSet, List, Optional

from .canonical import sha256_bytes
from .errors import LockConflictError, ParseError, UsageError
from .model import Ecosystem, FunctionInfo, FunctionKind, ScriptPackage

LOCKFILE_NAME = "repro.lock"


class TokenKind(str, Enum):
    Identifier = "Identifier"
    String = "String"
    Number = "Number"
    Punct = "Punct"
    Keyword = "Keyword"
    Comment = "Comment"
    Newline = "Newline"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    text: str
    line: int
    column: int
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Diagnostic:
    line: int
    message: str
    column: Optional[int] = None

    def to_dict(self):
        return {"line": self.line, "message": self.message}


R_KEYWORDS = frozenset(
    {
        "if", "else", "repeat", "while", "function", "for", "in", "next", "break",
        "TRUE", "FALSE", "NULL", "Inf", "NaN", "NA", "NA_integer_", "NA_real_",
        "NA_character_", "NA_complex_",
    }
)
PYTHON_KEYWORDS = frozenset(keyword.kwlist)

R_BASE_PACKAGES = frozenset(
    {
        "base", "compiler", "datasets", "graphics", "grDevices", "grid", "methods",
        "parallel", "splines", "stats", "stats4", "tcltk", "tools", "utils",
    }
)

_R_PUNCT = [
    "<<-", "->>", ":::", "::", "<-", "->", "==", "!=", "<=", ">=", "&&", "||", "|>",
]
_PY_PUNCT = [
    "**=", "//=", ">>=", "<<=", "...", "->", ":=", "==", "!=", "<=", ">=", "**", "//",
    "<<", ">>", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "@=",
]

_NUMBER_RE = {
    Ecosystem.R: re.compile(
        r"0[xX][0-9a-fA-F]+[Li]?|(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?[Li]?"
    ),
    Ecosystem.Python: re.compile(
        r"0[xX][0-9a-fA-F_]+|0[oO][0-7_]+|0[bB][01_]+"
        r"|(?:\d[\d_]*\.?[\d_]*|\.\d[\d_]*)(?:[eE][+-]?\d+)?[jJ]?"
    ),
}
_PY_STRING_PREFIX = re.compile(r"(?i)(?:rb|br|fr|rf|r|b|u|f)(?=['\"])")
_R_RAW_STRING = re.compile(r"[rR](['\"])(-*)([(\[{])")


def _coerce_language(language) -> Ecosystem:
    try:
        return Ecosystem(language)
    except ValueError:
        raise UsageError(f"unknown language {language!r}; expected R or Python") from None


class _Lexer:
    def __init__(self, source, language, diagnostics):
        self.src = source
        self.lang = language
        self.diagnostics = diagnostics
        self.pos = 0
        self.line = 1
        self.line_start = 0
        self.tokens = []

    def emit(self, kind, start, end):
        text = self.src[start:end]
        col = start - self.line_start + 1
        self.tokens.append(Token(kind, text, self.line, col, start))
        # keep line bookkeeping right for tokens that span lines
        newlines = text.count("\n")
        if newlines and kind is not TokenKind.Newline:
            self.line += newlines
            self.line_start = start + text.rindex("\n") + 1
        self.pos = end

    def diag(self, offset, message):
        line = self.src.count("\n", 0, offset) + 1
        col = offset - (self.src.rfind("\n", 0, offset) + 1) + 1
        self.diagnostics.append(Diagnostic(line, f"{message} at {line}:{col}", col))

    def run(self):
        src = self.src
        n = len(src)
        while self.pos < n:
            ch = src[self.pos]
            start = self.pos
            if ch == "\n" or ch == "\r":
                end = start + 2 if src.startswith("\r\n", start) else start + 1
                self.emit(TokenKind.Newline, start, end)
                self.line += 1
                self.line_start = end
            elif ch in " \t\f\v":
                self.pos += 1
            elif ch == "\\" and self.lang is Ecosystem.Python and src.startswith(("\\\n", "\\\r"), start):
                # explicit line continuation is whitespace
                end = start + (3 if src.startswith("\\\r\n", start) else 2)
                self.pos = end
                self.line += 1
                self.line_start = end
            elif ch == "#":
                end = start
                while end < n and src[end] not in "\r\n":
                    end += 1
                self.emit(TokenKind.Comment, start, end)
            elif self._string_start(start):
                pass
            elif self.lang is Ecosystem.R and ch == "`":
                end = src.find("`", start + 1)
                line_end = self._line_end(start)
                if end == -1 or end > line_end:
                    self.diag(start, "unterminated backtick identifier")
                    self.emit(TokenKind.Identifier, start, line_end)
                else:
                    self.emit(TokenKind.Identifier, start, end + 1)
            elif self.lang is Ecosystem.R and ch == "%":
                end = src.find("%", start + 1)
                line_end = self._line_end(start)
                if end == -1 or end > line_end:
                    self.emit(TokenKind.Punct, start, start + 1)
                else:
                    self.emit(TokenKind.Punct, start, end + 1)
            elif self._number(start):
                pass
            elif self._identifier(start):
                pass
            else:
                table = _R_PUNCT if self.lang is Ecosystem.R else _PY_PUNCT
                for op in table:
                    if src.startswith(op, start):
                        self.emit(TokenKind.Punct, start, start + len(op))
                        break
                else:
                    self.emit(TokenKind.Punct, start, start + 1)
        return self.tokens

    def _line_end(self, start):
        end = start
        while end < len(self.src) and self.src[end] not in "\r\n":
            end += 1
        return end

    def _number(self, start):
        ch = self.src[start]
        if not (ch.isdigit() or (ch == "." and self.src[start + 1:start + 2].isdigit())):
            return False
        match = _NUMBER_RE[self.lang].match(self.src, start)
        self.emit(TokenKind.Number, start, match.end())
        return True

    def _identifier(self, start):
        src = self.src
        ch = src[start]
        if self.lang is Ecosystem.R:
            if not (ch.isalpha() or ch == "." or ch == "_"):
                return False
            end = start + 1
            while end < len(src) and (src[end].isalnum() or src[end] in "._"):
                end += 1
            text = src[start:end]
            kind = TokenKind.Keyword if text in R_KEYWORDS else TokenKind.Identifier
        else:
            if not (ch.isalpha() or ch == "_"):
                return False
            end = start + 1
            while end < len(src) and (src[end].isalnum() or src[end] == "_"):
                end += 1
            text = src[start:end]
            kind = TokenKind.Keyword if text in PYTHON_KEYWORDS else TokenKind.Identifier
        self.emit(kind, start, end)
        return True

    def _string_start(self, start):
        src = self.src
        if self.lang is Ecosystem.Python:
            prefix = _PY_STRING_PREFIX.match(src, start)
            quote_at = prefix.end() if prefix else start
            if quote_at >= len(src) or src[quote_at] not in "'\"":
                return False
            self._python_string(start, quote_at)
            return True
        raw = _R_RAW_STRING.match(src, start)
        if raw:
            self._r_raw_string(start, raw)
            return True
        if src[start] not in "'\"":
            return False
        self._r_string(start)
        return True

    def _python_string(self, start, quote_at):
        src = self.src
        quote = src[quote_at]
        triple = src.startswith(quote * 3, quote_at)
        delim = quote * 3 if triple else quote
        i = quote_at + len(delim)
        while i < len(src):
            c = src[i]
            if c == "\\":
                i += 2
                continue
            if src.startswith(delim, i):
                self.emit(TokenKind.String, start, i + len(delim))
                return
            if not triple and c in "\r\n":
                break
            i += 1
        i = min(i, len(src))
        self.diag(start, "unterminated string literal")
        self.emit(TokenKind.String, start, i)

    def _r_string(self, start):
        # R strings may legitimately span lines
        src = self.src
        quote = src[start]
        i = start + 1
        while i < len(src):
            c = src[i]
            if c == "\\":
                i += 2
                continue
            if c == quote:
                self.emit(TokenKind.String, start, i + 1)
                return
            i += 1
        end = self._line_end(start)
        self.diag(start, "unterminated string literal")
        self.emit(TokenKind.String, start, end)

    def _r_raw_string(self, start, match):
        quote, dashes, opener = match.group(1), match.group(2), match.group(3)
        closer = {"(": ")", "[": "]", "{": "}"}[opener] + dashes + quote
        end = self.src.find(closer, match.end())
        if end == -1:
            self.diag(start, "unterminated raw string literal")
            self.emit(TokenKind.String, start, self._line_end(start))
        else:
            self.emit(TokenKind.String, start, end + len(closer))


def tokenize(source: str, language, diagnostics: Optional[list] = None) -> List[Token]:
    """Split ``source`` into tokens; whitespace (other than newlines) is skipped.

    Unterminated literals are reported through ``diagnostics`` when a list is
    supplied; the lexer then resumes at the end of the offending line.
    """
    lang = _coerce_language(language)
    sink = diagnostics if diagnostics is not None else []
    return _Lexer(source, lang, sink).run()


@dataclass(frozen=True)
class ScanResult:
    dependencies: FrozenSet[str]
    defined_functions: FrozenSet[FunctionInfo]
    called_functions: FrozenSet[FunctionInfo]
    diagnostics: tuple = ()
    script_hash: Optional[str] = None

    @property
    def functions(self) -> FrozenSet[FunctionInfo]:
        return self.defined_functions | self.called_functions

    def to_dict(self):
        def fn(items):
            return [
                f.to_dict() for f in sorted(items, key=lambda f: f.sort_key())
            ]

        return {
            "called_functions": fn(self.called_functions),
            "defined_functions": fn(self.defined_functions),
            "dependencies": sorted(self.dependencies),
            "diagnostics": [d.to_dict() for d in self.diagnostics],
            "script_hash": self.script_hash,
        }


def _string_value(token):
    text = token.text
    prefix = _PY_STRING_PREFIX.match(text)
    if prefix:
        text = text[prefix.end():]
    for delim in ('"""', "'''", '"', "'"):
        if text.startswith(delim) and text.endswith(delim) and len(text) >= 2 * len(delim):
            return text[len(delim):-len(delim)]
    return None


def _is_name(token):
    return token.kind is TokenKind.Identifier


def _name_text(token):
    text = token.text
    if text.startswith("`") and text.endswith("`") and len(text) >= 2:
        return text[1:-1]
    return text


class _Collector:
    def __init__(self):
        self.deps = set()
        self.defined = set()
        self.called = set()
        self.diagnostics = []

    def diag(self, token, message):
        self.diagnostics.append(Diagnostic(token.line, message, token.column))


def _call_args(tokens, open_index):
    """Split the argument list of the call whose ``(`` is at ``open_index``.

    Returns (list of argument token lists, index of the closing paren).
    """
    depth = 0
    args = [[]]
    i = open_index
    while i < len(tokens):
        tok = tokens[i]
        if tok.kind is TokenKind.Punct and tok.text in "([{":
            depth += 1
            if depth > 1:
                args[-1].append(tok)
        elif tok.kind is TokenKind.Punct and tok.text in ")]}":
            depth -= 1
            if depth == 0:
                return [a for a in args if a], i
            args[-1].append(tok)
        elif depth == 1 and tok.kind is TokenKind.Punct and tok.text == ",":
            args.append([])
        elif tok.kind is not TokenKind.Newline:
            args[-1].append(tok)
        i += 1
    return [a for a in args if a], len(tokens) - 1


def _named_true(args, name):
    for arg in args:
        if (
            len(arg) >= 3
            and arg[0].text == name
            and arg[1].text == "="
            and arg[2].text in ("TRUE", "T")
        ):
            return True
    return False


def _scan_r(tokens, out):
    for i, tok in enumerate(tokens):
        nxt = tokens[i + 1] if i + 1 < len(tokens) else None
        if tok.kind is TokenKind.Punct and tok.text in ("::", ":::"):
            prev = tokens[i - 1] if i > 0 else None
            if prev is not None and (_is_name(prev) or prev.kind is TokenKind.String):
                pkg = _name_text(prev) if _is_name(prev) else _string_value(prev)
                if pkg:
                    out.deps.add(pkg)
            continue
        if not _is_name(tok):
            continue
        name = _name_text(tok)
        prev = tokens[i - 1] if i > 0 else None
        is_qualified = prev is not None and prev.kind is TokenKind.Punct and prev.text in ("::", ":::")
        if nxt is not None and nxt.kind is TokenKind.Punct and nxt.text in ("<-", "="):
            after = tokens[i + 2] if i + 2 < len(tokens) else None
            if after is not None and after.kind is TokenKind.Keyword and after.text == "function":
                # ``f(name = function(x) ...)`` is an argument, not a definition
                if not (nxt.text == "=" and _inside_call(tokens, i)):
                    out.defined.add(FunctionInfo(name, FunctionKind.defined))
        if nxt is None or not (nxt.kind is TokenKind.Punct and nxt.text == "("):
            continue
        if is_qualified:
            pkg_tok = tokens[i - 2]
            pkg = _name_text(pkg_tok) if _is_name(pkg_tok) else _string_value(pkg_tok)
            out.called.add(FunctionInfo(name, FunctionKind.called, pkg or None))
            continue
        out.called.add(FunctionInfo(name, FunctionKind.called))
        if name in ("library", "require"):
            args, _ = _call_args(tokens, i + 1)
            if not args:
                out.diag(tok, f"{name}() without a package argument")
                continue
            first = args[0]
            if _named_true(args, "character.only"):
                out.diag(tok, f"dynamic {name}(): package name computed at run time, not resolved")
            elif len(first) == 1 and _is_name(first[0]):
                out.deps.add(_name_text(first[0]))
            elif len(first) == 1 and first[0].kind is TokenKind.String and _string_value(first[0]):
                out.deps.add(_string_value(first[0]))
            elif len(first) == 3 and first[0].text == "package" and first[1].text == "=" and (
                _is_name(first[2]) or first[2].kind is TokenKind.String
            ):
                value = first[2]
                out.deps.add(_name_text(value) if _is_name(value) else _string_value(value))
            else:
                out.diag(tok, f"dynamic {name}(): package argument is an expression, not resolved")
        elif name == "requireNamespace":
            args, _ = _call_args(tokens, i + 1)
            first = args[0] if args else []
            if len(first) == 1 and first[0].kind is TokenKind.String and _string_value(first[0]):
                out.deps.add(_string_value(first[0]))
            else:
                out.diag(tok, "dynamic requireNamespace(): package name not a literal, not resolved")
        elif name == "do.call":
            out.diag(tok, "do.call() target resolved at run time, not scanned")


def _inside_call(tokens, index):
    depth = 0
    for tok in reversed(tokens[:index]):
        if tok.kind is not TokenKind.Punct:
            continue
        if tok.text in ")]}":
            depth += 1
        elif tok.text in "([{":
            if depth == 0:
                return tok.text == "("
            depth -= 1
    return False


def _statement_start(tokens, i):
    if i == 0:
        return True
    prev = tokens[i - 1]
    return prev.kind is TokenKind.Newline or (prev.kind is TokenKind.Punct and prev.text in (";", ":"))


def _dotted(tokens, i):
    """Read ``a.b.c`` starting at ``i``; returns (parts, next index)."""
    parts = []
    while i < len(tokens) and _is_name(tokens[i]):
        parts.append(tokens[i].text)
        if i + 1 < len(tokens) and tokens[i + 1].text == ".":
            i += 2
        else:
            i += 1
            break
    return parts, i


def _statement_tokens(tokens, i):
    """Tokens of the logical line starting at ``i`` (newlines inside brackets are joined)."""
    depth = 0
    out = []
    while i < len(tokens):
        tok = tokens[i]
        if tok.kind is TokenKind.Newline and depth == 0:
            break
        if tok.kind is TokenKind.Punct:
            if tok.text == ";" and depth == 0:
                break
            if tok.text in "([{":
                depth += 1
            elif tok.text in ")]}":
                depth = max(0, depth - 1)
        if tok.kind is not TokenKind.Newline:
            out.append(tok)
        i += 1
    return out


def _parse_import(stmt, bindings, out):
    # stmt[0] is ``import``
    i = 1
    while i < len(stmt):
        parts, i = _dotted(stmt, i)
        if not parts:
            out.diag(stmt[0], "malformed import statement")
            return
        top = parts[0]
        out.deps.add(top)
        if i + 1 < len(stmt) and stmt[i].text == "as" and _is_name(stmt[i + 1]):
            bindings[stmt[i + 1].text] = top
            i += 2
        else:
            bindings[top] = top
        if i < len(stmt) and stmt[i].text == ",":
            i += 1
        else:
            break


def _parse_from(stmt, bindings, out):
    i = 1
    if i < len(stmt) and stmt[i].text in (".", "..."):
        return  # relative import: local module
    parts, i = _dotted(stmt, i)
    if not parts or i >= len(stmt) or stmt[i].text != "import":
        out.diag(stmt[0], "malformed from-import statement")
        return
    top = parts[0]
    out.deps.add(top)
    i += 1
    while i < len(stmt):
        tok = stmt[i]
        if tok.text in ("(", ")", ","):
            i += 1
            continue
        if tok.text == "*":
            i += 1
            continue
        if _is_name(tok):
            if i + 2 < len(stmt) and stmt[i + 1].text == "as" and _is_name(stmt[i + 2]):
                bindings[stmt[i + 2].text] = top
                i += 3
            else:
                bindings[tok.text] = top
                i += 1
            continue
        i += 1


def _chain_root(tokens, i):
    """Leftmost identifier of the attribute chain ending at ``tokens[i]``."""
    j = i
    while j >= 2 and tokens[j - 1].text == "." and _is_name(tokens[j - 2]):
        j -= 2
    if j >= 1 and tokens[j - 1].text == ".":
        return None, j  # chain rooted in a call result or literal
    return tokens[j].text, j


def _scan_python(tokens, out):
    bindings = {}
    for i, tok in enumerate(tokens):
        if tok.kind is TokenKind.Keyword and tok.text in ("import", "from") and _statement_start(tokens, i):
            stmt = _statement_tokens(tokens, i)
            if tok.text == "import":
                _parse_import(stmt, bindings, out)
            else:
                _parse_from(stmt, bindings, out)
    for i, tok in enumerate(tokens):
        if not _is_name(tok):
            continue
        nxt = tokens[i + 1] if i + 1 < len(tokens) else None
        if nxt is None or not (nxt.kind is TokenKind.Punct and nxt.text == "("):
            continue
        prev = tokens[i - 1] if i > 0 else None
        if prev is not None and prev.kind is TokenKind.Keyword and prev.text in ("def", "class"):
            if prev.text == "def":
                out.defined.add(FunctionInfo(tok.text, FunctionKind.defined))
            continue
        root, _ = _chain_root(tokens, i)
        source = bindings.get(root) if root is not None else None
        out.called.add(FunctionInfo(tok.text, FunctionKind.called, source))
        if tok.text in ("import_module", "__import__"):
            out.diag(tok, f"dynamic import via {tok.text}() not resolved")


def scan_script(source: str, language) -> ScanResult:
    """Extract dependencies and function definitions/calls from a script."""
    lang = _coerce_language(language)
    diagnostics = []
    tokens = tokenize(source, lang, diagnostics)
    significant = [t for t in tokens if t.kind is not TokenKind.Comment]
    out = _Collector()
    out.diagnostics.extend(diagnostics)
    if lang is Ecosystem.R:
        _scan_r(significant, out)
    else:
        _scan_python(significant, out)
    ordered = tuple(sorted(out.diagnostics, key=lambda d: (d.line, d.column or 0, d.message)))
    return ScanResult(
        dependencies=frozenset(out.deps),
        defined_functions=frozenset(out.defined),
        called_functions=frozenset(out.called),
        diagnostics=ordered,
        script_hash=sha256_bytes(source.encode("utf-8")),
    )


def language_for_path(path) -> Ecosystem:
    suffix = str(path).rsplit(".", 1)[-1].lower() if "." in str(path) else ""
    if suffix == "r":
        return Ecosystem.R
    if suffix == "py":
        return Ecosystem.Python
    raise UsageError(f"cannot infer script language from {path!r}; expected .R or .py")


def is_runtime_bundled(package: str, ecosystem) -> bool:
    """True for packages that ship with the language runtime itself."""
    ecosystem = Ecosystem(ecosystem)
    if ecosystem is Ecosystem.R:
        return package in R_BASE_PACKAGES
    return package in getattr(sys, "stdlib_module_names", ()) or package in sys.builtin_module_names


class LockFormat(str, Enum):
    Canonical = "Canonical"
    RequirementsStyle = "RequirementsStyle"
    PackratStyle = "PackratStyle"


_REQ_LINE = re.compile(r"^([A-Za-z0-9][A-Za-z0-9._-]*)\s*==\s*([^\s;#]+)\s*$")
_DCF_LINE = re.compile(r"^([A-Za-z][A-Za-z0-9._-]*):\s*(.*)$")


def _add_locked(found, pkg, line):
    key = (pkg.ecosystem, pkg.name)
    existing = found.get(key)
    if existing is not None and existing.version != pkg.version:
        raise LockConflictError(pkg.name, {existing.version, pkg.version})
    found[key] = pkg


def read_lockfile(content: str, format) -> FrozenSet[ScriptPackage]:
    """Parse a pinned package list in one of the three supported layouts."""
    try:
        fmt = LockFormat(format)
    except ValueError:
        raise UsageError(f"unknown lockfile format {format!r}") from None
    found = {}
    lines = content.splitlines()
    if fmt is LockFormat.Canonical:
        for number, line in enumerate(lines, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise ParseError("expected 'ecosystem<TAB>name<TAB>version'", number)
            try:
                eco = Ecosystem(parts[0].strip())
            except ValueError:
                raise ParseError(f"unknown ecosystem {parts[0]!r}", number) from None
            _add_locked(found, ScriptPackage(parts[1].strip(), parts[2].strip(), eco), number)
    elif fmt is LockFormat.RequirementsStyle:
        for number, line in enumerate(lines, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            match = _REQ_LINE.match(stripped)
            if not match:
                raise ParseError(f"expected 'name==version', got {stripped!r}", number)
            _add_locked(found, ScriptPackage(match.group(1), match.group(2), Ecosystem.Python), number)
    else:
        _read_packrat(lines, found)
    return frozenset(found.values())


def _read_packrat(lines, found):
    record = {}
    record_line = None
    last_key = None

    def flush():
        if not record:
            return
        if "Package" in record or "Version" in record:
            if "Package" not in record or "Version" not in record:
                missing = "Package" if "Package" not in record else "Version"
                raise ParseError(f"record lacks a {missing}: field", record_line)
            _add_locked(
                found, ScriptPackage(record["Package"], record["Version"], Ecosystem.R), record_line
            )
        record.clear()

    for number, line in enumerate(lines, 1):
        if not line.strip():
            flush()
            last_key = None
            continue
        if line.lstrip().startswith("#"):
            continue
        if line[0] in " \t":
            if last_key is None:
                raise ParseError("continuation line outside a field", number)
            continue
        match = _DCF_LINE.match(line)
        if not match:
            raise ParseError(f"expected 'Field: value', got {line!r}", number)
        if not record:
            record_line = number
        last_key = match.group(1)
        record[last_key] = match.group(2).strip()
    flush()


def write_lockfile(packages) -> str:
    """Render packages as a sorted canonical lockfile (LF endings)."""
    lines = sorted(f"{p.ecosystem.value}\t{p.name}\t{p.version}" for p in packages)
    return "".join(line + "\n" for line in lines)
