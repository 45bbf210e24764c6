"""YAML model files.

Example::

    name: sis-file
    domain: [0, 1]
    params:
      beta: "2 + cos(pi*x)"
      gamma: 1
    compartments:
      - {name: I, infected: true}
      - {name: S, infected: false}
    diffusion: {I: sweep, S: sweep}
    F: {I: "beta*S*I"}
    Vplus: {S: "gamma*I"}
    Vminus: {I: "gamma*I", S: "beta*S*I"}
    conserved_total: 1
    dfe_small: {S: 1}
    dfe_large: {S: 1}

Parameters may be numbers or expressions in ``x``; they are inlined into
the rate expressions. Rates default to 0. ``dfe_large`` entries are either
a constant or ``{num: ..., den: ...}`` meaning ``∫num / ∫den``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Optional, Union

import yaml

from . import expr as ex
from .model import CompartmentModel, LargeLimit

__all__ = ["ModelFileError", "load_model_file", "parse_model_text"]

TOP_KEYS = {
    "name", "domain", "params", "compartments", "diffusion", "F", "Vplus", "Vminus",
    "conserved_total", "dfe_small", "dfe_large",
}
REQUIRED = ("domain", "compartments", "diffusion")


class ModelFileError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None, source: str = "<model>"):
        self.message, self.line, self.column, self.source = message, line, column, source
        where = f"{source}:{line}:{column}: " if line is not None else f"{source}: "
        super().__init__(where + message)


class _Loader:
    def __init__(self, text: str, source: str):
        self.text, self.source = text, source

    def fail(self, message: str, node: Optional[yaml.Node] = None, offset: int = 0):
        if node is None:
            raise ModelFileError(message, source=self.source)
        mark = node.start_mark
        col = mark.column + 1 + offset
        if isinstance(node, yaml.ScalarNode) and node.style in ("'", '"'):
            col += 1
        raise ModelFileError(message, mark.line + 1, col, self.source)

    def mapping(self, node, what: str) -> list[tuple[str, yaml.Node, yaml.Node]]:
        if not isinstance(node, yaml.MappingNode):
            self.fail(f"{what} must be a mapping", node)
        out, seen = [], set()
        for k, v in node.value:
            if not isinstance(k, yaml.ScalarNode):
                self.fail(f"{what}: keys must be plain names", k)
            if k.value in seen:
                self.fail(f"{what}: duplicate key {k.value!r}", k)
            seen.add(k.value)
            out.append((k.value, k, v))
        return out

    def scalar(self, node, what: str) -> Any:
        if not isinstance(node, yaml.ScalarNode):
            self.fail(f"{what} must be a scalar", node)
        return yaml.safe_load(yaml.serialize(node))

    def number(self, node, what: str) -> float:
        v = self.scalar(node, what)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(f"{what} must be a number", node)
        return float(v)

    def expression(self, node, vocab, what: str, params) -> ex.Expression:
        v = self.scalar(node, what)
        if isinstance(v, bool) or v is None:
            self.fail(f"{what} must be a number or an expression", node)
        if isinstance(v, (int, float)):
            return ex.const(float(v))
        try:
            e = ex.parse_expression(str(v), list(vocab))
        except ex.UnknownIdentifierError as err:
            self.fail(f"{what}: unknown identifier {err.name!r}", node, err.position)
        except ex.ParseError as err:
            self.fail(f"{what}: {err}", node, err.position)
        return ex.substitute(e, params) if params else e


def parse_model_text(text: str, source: str = "<model>") -> CompartmentModel:
    ld = _Loader(text, source)
    try:
        root = yaml.compose(text)
    except yaml.MarkedYAMLError as err:
        mark = err.problem_mark
        raise ModelFileError(f"YAML syntax error: {err.problem}", mark.line + 1 if mark else None,
                             mark.column + 1 if mark else None, source) from None
    if root is None:
        ld.fail("model file is empty")
    top = {k: (kn, v) for k, kn, v in ld.mapping(root, "model file")}
    for k, (kn, _) in top.items():
        if k not in TOP_KEYS:
            ld.fail(f"unknown key {k!r}; allowed: {', '.join(sorted(TOP_KEYS))}", kn)
    for k in REQUIRED:
        if k not in top:
            ld.fail(f"missing required key {k!r}", root)

    name = "custom"
    if "name" in top:
        name = str(ld.scalar(top["name"][1], "name"))

    dnode = top["domain"][1]
    if not isinstance(dnode, yaml.SequenceNode) or len(dnode.value) != 2:
        ld.fail("domain must be a list [a, b]", dnode)
    a, b = (ld.number(v, "domain endpoint") for v in dnode.value)
    if not a < b:
        ld.fail("domain needs a < b", dnode)

    cnode = top["compartments"][1]
    if not isinstance(cnode, yaml.SequenceNode) or not cnode.value:
        ld.fail("compartments must be a non-empty list", cnode)
    names, flags = [], []
    for item in cnode.value:
        entries = {k: (kn, v) for k, kn, v in ld.mapping(item, "compartment")}
        for k, (kn, _) in entries.items():
            if k not in ("name", "infected"):
                ld.fail(f"unknown compartment key {k!r}", kn)
        if "name" not in entries:
            ld.fail("compartment needs a name", item)
        nm = str(ld.scalar(entries["name"][1], "compartment name"))
        if not nm.isidentifier():
            ld.fail(f"compartment name {nm!r} is not an identifier", entries["name"][1])
        inf = ld.scalar(entries["infected"][1], "infected") if "infected" in entries else False
        if not isinstance(inf, bool):
            ld.fail("infected must be true or false", entries["infected"][1])
        if nm in names:
            ld.fail(f"duplicate compartment {nm!r}", entries["name"][1])
        names.append(nm)
        flags.append(inf)
    m = sum(flags)
    if flags != [True] * m + [False] * (len(flags) - m):
        ld.fail("infected compartments must be listed first", cnode)
    if not 1 <= m < len(names):
        ld.fail("need at least one infected and one uninfected compartment", cnode)
    comp_nodes = {nm: item for nm, item in zip(names, cnode.value)}

    params: dict[str, ex.Expression] = {}
    raw_params: dict[str, object] = {}
    if "params" in top:
        for k, kn, v in ld.mapping(top["params"][1], "params"):
            if k in names or k == "x" or k in ex.FUNCTIONS or k == "pi":
                ld.fail(f"parameter name {k!r} clashes with a compartment or reserved name", kn)
            if not k.isidentifier():
                ld.fail(f"parameter name {k!r} is not an identifier", kn)
            e = ld.expression(v, ["x", *params], f"parameter {k}", params)
            params[k] = e
            raw_params[k] = ex.to_string(e)

    vocab = ["x", *names, *[f"u{i + 1}" for i in range(len(names))], *params]

    def per_compartment(key: str, default):
        out = {nm: default for nm in names}
        if key in top:
            for k, kn, v in ld.mapping(top[key][1], key):
                if k not in out:
                    ld.fail(f"{key}: unknown compartment {k!r}", kn)
                out[k] = v
        return out

    rates = {}
    for key in ("F", "Vplus", "Vminus"):
        nodes = per_compartment(key, None)
        rates[key] = tuple(
            ex.const(0.0) if nodes[nm] is None else ld.expression(nodes[nm], vocab, f"{key}[{nm}]", params)
            for nm in names)
    for i in range(m, len(names)):
        if not ex.is_zero(rates["F"][i]):
            ld.fail(f"F must be zero for uninfected compartment {names[i]!r}", top["F"][1])

    dnodes = per_compartment("diffusion", None)
    diffusion = []
    for nm in names:
        v = dnodes[nm]
        if v is None:
            ld.fail(f"diffusion rate missing for {nm!r}", top["diffusion"][1])
        val = ld.scalar(v, f"diffusion[{nm}]")
        if val == "sweep":
            diffusion.append(None)
            continue
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not val > 0:
            ld.fail(f"diffusion[{nm}] must be a positive number or 'sweep'", v)
        diffusion.append(float(val))

    conserved = None
    if "conserved_total" in top:
        conserved = ld.number(top["conserved_total"][1], "conserved_total")
        if not conserved > 0:
            ld.fail("conserved_total must be positive", top["conserved_total"][1])

    unin = names[m:]

    def uninfected_map(key):
        if key not in top:
            return None
        entries = {k: (kn, v) for k, kn, v in ld.mapping(top[key][1], key)}
        for k, (kn, _) in entries.items():
            if k not in unin:
                ld.fail(f"{key}: {k!r} is not an uninfected compartment", kn)
        missing = [nm for nm in unin if nm not in entries]
        if missing:
            ld.fail(f"{key}: missing {', '.join(missing)}", top[key][1])
        return entries

    small = uninfected_map("dfe_small")
    dfe_small = None
    if small is not None:
        dfe_small = tuple(ld.expression(small[nm][1], ["x", *params], f"dfe_small[{nm}]", params) for nm in unin)
    large = uninfected_map("dfe_large")
    dfe_large = None
    if large is not None:
        lims = []
        for nm in unin:
            node = large[nm][1]
            if isinstance(node, yaml.MappingNode):
                parts = {k: v for k, _, v in ld.mapping(node, f"dfe_large[{nm}]")}
                if set(parts) != {"num", "den"}:
                    ld.fail(f"dfe_large[{nm}] needs exactly the keys num and den", node)
                lims.append(LargeLimit(
                    ld.expression(parts["num"], ["x", *params], f"dfe_large[{nm}].num", params),
                    ld.expression(parts["den"], ["x", *params], f"dfe_large[{nm}].den", params)))
            else:
                lims.append(LargeLimit(ld.expression(node, ["x", *params], f"dfe_large[{nm}]", params)))
        dfe_large = tuple(lims)

    try:
        return CompartmentModel(
            names=tuple(names), m=m, F=rates["F"], Vplus=rates["Vplus"], Vminus=rates["Vminus"],
            diffusion=tuple(diffusion), domain=(a, b), name=name, params=raw_params,
            conserved_total=conserved, dfe_small=dfe_small, dfe_large=dfe_large)
    except ValueError as err:
        ld.fail(str(err), root)
    raise AssertionError("unreachable")  # pragma: no cover


def load_model_file(path: Union[str, Path]) -> CompartmentModel:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as err:
        raise ModelFileError(f"cannot read model file: {err.strerror}", source=str(p)) from None
    return parse_model_text(text, source=str(p))
