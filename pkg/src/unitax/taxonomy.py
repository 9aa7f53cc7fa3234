"""Universal taxonomy construction from dataset classes and pairwise relations.

A dataset class is treated as a set of pixels.  The builder produces a flat
list of pairwise-disjoint elementary classes and, for every dataset class,
the set of elementary classes whose union it equals.  Three rewrite rules
are applied:

1. ``Equal`` classes are merged into one element.
2. ``Subset(a, b)`` replaces ``b`` by its remainder ``b - a`` and maps ``b``
   to ``{b - a} | mapping(a)``.
3. ``Overlap(a, b)`` splits the pair into ``a - b``, ``a & b`` and ``b - a``.

``ForceEqual`` and ``ForceDisjoint`` are simplifying assumptions that
override an overlap which would otherwise need rule 3.  Classes of different
datasets with no relation between them are taken to be disjoint.
"""
import graphlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from itertools import combinations

from scipy.cluster.hierarchy import DisjointSet

from .errors import (
    CycleError,
    DanglingReferenceError,
    DuplicateError,
    InconsistencyError,
    ParseError,
)

EQUAL = "Equal"
SUBSET = "Subset"
OVERLAP = "Overlap"
FORCE_EQUAL = "ForceEqual"
FORCE_DISJOINT = "ForceDisjoint"
RELATION_KINDS = (EQUAL, SUBSET, OVERLAP, FORCE_EQUAL, FORCE_DISJOINT)

# Allowed decomposition lengths per relation kind.
_DECOMPOSITION_LENGTHS = {
    EQUAL: (0, 1),
    FORCE_EQUAL: (0, 1),
    SUBSET: (0, 1),
    OVERLAP: (3,),
    FORCE_DISJOINT: (0,),
}


@dataclass(frozen=True)
class DatasetClass:
    dataset: str
    name: str
    eval: bool = True

    @property
    def key(self):
        return f"{self.dataset}.{self.name}"


@dataclass(frozen=True)
class Relation:
    """A declared relation ``left <kind> right`` between two class keys.

    ``decomposition`` is ``None`` when absent.  For ``Overlap`` it names the
    (left-only, shared, right-only) parts, entries may be ``None``.  For
    ``Subset`` it is either ``[name]`` for the remainder of ``right`` or an
    empty list, which declares that the subsets of ``right`` exhaust it.
    For ``Equal``/``ForceEqual`` a single entry names the merged element.
    """

    kind: str
    left: str
    right: str
    decomposition: tuple | None = None

    def __str__(self):
        return f"{self.kind}({self.left}, {self.right})"


@dataclass(frozen=True)
class RelationSpec:
    datasets: dict = field(default_factory=dict)
    relations: tuple = ()

    @cached_property
    def classes(self):
        return tuple(c for cls in self.datasets.values() for c in cls)

    @cached_property
    def class_index(self):
        return {c.key: i for i, c in enumerate(self.classes)}


@dataclass(frozen=True)
class ElementaryClass:
    id: str
    provenance: tuple = ()


@dataclass(frozen=True)
class UniversalTaxonomy:
    elements: tuple
    mapping: dict
    classes: tuple

    @cached_property
    def element_index(self):
        return {e.id: i for i, e in enumerate(self.elements)}

    @cached_property
    def element_ids(self):
        return tuple(e.id for e in self.elements)

    @cached_property
    def datasets(self):
        out = {}
        for c in self.classes:
            out.setdefault(c.dataset, []).append(c)
        return out

    def dataset_classes(self, dataset):
        try:
            return self.datasets[dataset]
        except KeyError:
            raise DanglingReferenceError(f"unknown dataset {dataset!r}") from None

    def to_dict(self):
        from .aggregation import export_matrix

        datasets = {
            ds: [{"class": c.name, "eval": c.eval} for c in cls]
            for ds, cls in self.datasets.items()
        }
        aggregation = {}
        for ds in self.datasets:
            m = export_matrix(self, ds)
            aggregation[ds] = m.to_dict()
        return {
            "elements": list(self.element_ids),
            "mapping": {k: list(v) for k, v in self.mapping.items()},
            "provenance": {e.id: [list(p) for p in e.provenance] for e in self.elements},
            "datasets": datasets,
            "dataset_order": list(self.datasets),
            "aggregation": aggregation,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc):
        try:
            provenance = doc.get("provenance", {})
            elements = tuple(
                ElementaryClass(e, tuple(tuple(p) for p in provenance.get(e, ())))
                for e in doc["elements"]
            )
            if "datasets" in doc:
                order = doc.get("dataset_order", list(doc["datasets"]))
                classes = tuple(
                    DatasetClass(ds, entry["class"], bool(entry.get("eval", True)))
                    for ds in order
                    for entry in doc["datasets"][ds]
                )
            else:
                classes = tuple(DatasetClass(*_split_key(k)) for k in doc["mapping"])
            mapping = {k: tuple(v) for k, v in doc["mapping"].items()}
        except (KeyError, TypeError, AttributeError) as exc:
            raise ParseError(f"malformed taxonomy document: {exc!r}") from None
        return cls(elements, mapping, classes)

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, exc.lineno, exc.colno) from None
        return cls.from_dict(doc)


# --------------------------------------------------------------------------
# parsing


def _split_key(key):
    if not isinstance(key, str) or "." not in key:
        raise ParseError(f"class reference {key!r} is not of the form 'DATASET.class'")
    ds, name = key.split(".", 1)
    return ds, name


def _no_duplicate_keys(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise DuplicateError(f"duplicate key {k!r}")
        out[k] = v
    return out


def parse_relation_spec(text):
    """Parse a JSON relation spec into a :class:`RelationSpec`."""
    try:
        doc = json.loads(text, object_pairs_hook=_no_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise ParseError("top level must be a JSON object")
    raw_datasets = doc.get("datasets", {})
    if raw_datasets == []:
        raw_datasets = {}
    if not isinstance(raw_datasets, dict):
        raise ParseError("'datasets' must map dataset names to class lists")

    datasets = {}
    for ds, entries in raw_datasets.items():
        if not ds or "." in ds:
            raise ParseError(f"invalid dataset name {ds!r}")
        if not isinstance(entries, list):
            raise ParseError(f"classes of dataset {ds!r} must be a list")
        seen = set()
        classes = []
        for entry in entries:
            if isinstance(entry, str):
                name, ev = entry, True
            elif isinstance(entry, dict) and isinstance(entry.get("class"), str):
                name, ev = entry["class"], entry.get("eval", True)
                if not isinstance(ev, bool):
                    raise ParseError(f"'eval' of {ds}.{name} must be a boolean")
            else:
                raise ParseError(f"malformed class entry {entry!r} in dataset {ds!r}")
            if not name:
                raise ParseError(f"empty class name in dataset {ds!r}")
            if name in seen:
                raise DuplicateError(f"duplicate class {ds}.{name}")
            seen.add(name)
            classes.append(DatasetClass(ds, name, ev))
        datasets[ds] = tuple(classes)

    known = {c.key for cls in datasets.values() for c in cls}
    relations = []
    raw_relations = doc.get("relations", [])
    if not isinstance(raw_relations, list):
        raise ParseError("'relations' must be a list")
    for i, r in enumerate(raw_relations):
        if not isinstance(r, dict):
            raise ParseError(f"relation #{i} is not an object")
        kind = r.get("kind")
        if kind not in RELATION_KINDS:
            raise ParseError(f"relation #{i}: unknown kind {kind!r}")
        ends = []
        for side in ("left", "right"):
            key = r.get(side)
            _split_key(key)
            if key not in known:
                raise DanglingReferenceError(f"relation #{i} references undeclared class {key!r}")
            ends.append(key)
        decomposition = r.get("decomposition")
        if decomposition is not None:
            if not isinstance(decomposition, list) or not all(
                d is None or (isinstance(d, str) and d) for d in decomposition
            ):
                raise ParseError(f"relation #{i}: decomposition must be a list of names")
            if len(decomposition) not in _DECOMPOSITION_LENGTHS[kind]:
                raise ParseError(
                    f"relation #{i}: {kind} takes a decomposition of length "
                    f"{' or '.join(map(str, _DECOMPOSITION_LENGTHS[kind]))}"
                )
            decomposition = tuple(decomposition)
        relations.append(Relation(kind, ends[0], ends[1], decomposition))
    return RelationSpec(datasets, tuple(relations))


def load_relation_spec(path):
    with open(path, encoding="utf-8") as f:
        return parse_relation_spec(f.read())


def worked_examples_text():
    """JSON text of the bundled fixture holding the classic worked examples."""
    return resources.files("unitax.data").joinpath("worked_examples.json").read_text("utf-8")


# --------------------------------------------------------------------------
# building


class _Element:
    __slots__ = ("uid", "order", "explicit", "base", "minus", "provenance", "alive")

    def __init__(self, uid, order, base, provenance):
        self.uid = uid
        self.order = order
        self.explicit = None
        self.base = base
        self.minus = []
        self.provenance = list(provenance)
        self.alive = True

    def name_explicitly(self, name, relation):
        if self.explicit is not None and self.explicit != name:
            raise InconsistencyError(
                f"{relation} names element {self.explicit!r} a second time as {name!r}"
            )
        self.explicit = name

    @property
    def hint(self):
        return self.base + "".join(f"_minus_{m}" for m in self.minus)


def _suppressed_pairs(spec):
    return {
        frozenset((r.left, r.right))
        for r in spec.relations
        if r.kind in (FORCE_EQUAL, FORCE_DISJOINT)
    }


def build_taxonomy(spec):
    """Build the universal taxonomy for ``spec``.

    Raises :class:`InconsistencyError` when the relations contradict each
    other and :class:`CycleError` for cyclic subset chains.
    """
    classes = spec.classes
    index = spec.class_index
    suppressed = _suppressed_pairs(spec)

    # rule 1: equality groups
    groups = DisjointSet(range(len(classes)))
    for r in spec.relations:
        if r.kind in (EQUAL, FORCE_EQUAL):
            groups.merge(index[r.left], index[r.right])
    group_of = {i: min(groups.subset(i)) for i in range(len(classes))}
    members = defaultdict(list)
    for i in range(len(classes)):
        members[group_of[i]].append(i)

    def equal_chain(g):
        keys = {classes[i].key for i in members[g]}
        return ", ".join(
            str(r) for r in spec.relations
            if r.kind in (EQUAL, FORCE_EQUAL) and r.left in keys
        )

    for r in spec.relations:
        gl, gr = group_of[index[r.left]], group_of[index[r.right]]
        if gl != gr:
            continue
        if r.kind == FORCE_DISJOINT:
            raise InconsistencyError(f"{r} contradicts {equal_chain(gl)}")
        if r.kind == SUBSET:
            raise CycleError(f"{r} is cyclic: both sides are equal via {equal_chain(gl)}")
        if r.kind == OVERLAP and frozenset((r.left, r.right)) not in suppressed:
            raise InconsistencyError(f"{r} contradicts {equal_chain(gl)}")

    elements = []
    own = {}
    mapping = {}
    for g in sorted(members):
        rep = classes[g]
        el = _Element(len(elements), (g, 0, 0), rep.name,
                      [(classes[i].dataset, classes[i].name) for i in members[g]])
        elements.append(el)
        own[g] = el
        mapping[g] = {el.uid}
    for r in spec.relations:
        if r.kind in (EQUAL, FORCE_EQUAL) and r.decomposition:
            own[group_of[index[r.left]]].name_explicitly(r.decomposition[0], r)

    # rule 2: subsets, innermost first
    subset_rels = [
        (pos, r) for pos, r in enumerate(spec.relations) if r.kind == SUBSET
    ]
    sorter = graphlib.TopologicalSorter()
    for g in members:
        sorter.add(g)
    for _, r in subset_rels:
        sorter.add(group_of[index[r.right]], group_of[index[r.left]])
    try:
        topo = {g: k for k, g in enumerate(sorter.static_order())}
    except graphlib.CycleError as exc:
        cycle = " < ".join(classes[g].key for g in exc.args[1])
        raise CycleError(f"cyclic subset chain: {cycle}") from None
    subset_rels.sort(key=lambda item: (topo[group_of[index[item[1].left]]], item[0]))

    exhausted = {}
    for _, r in subset_rels:
        gi, gj = group_of[index[r.left]], group_of[index[r.right]]
        added = set(mapping[gi])
        residual = own[gj]
        for g, elems in mapping.items():
            if residual.uid in elems:
                elems |= added
        left_name = r.left.split(".", 1)[1]
        if r.decomposition is None:
            residual.minus.append(left_name)
        elif len(r.decomposition) == 0:
            exhausted.setdefault(gj, []).append(r)
        elif r.decomposition[0] is not None:
            residual.name_explicitly(r.decomposition[0], r)
    for gj, rels in exhausted.items():
        if own[gj].explicit is not None:
            raise InconsistencyError(
                f"{rels[0]} declares {classes[gj].key} exhausted but its remainder "
                f"is named {own[gj].explicit!r}"
            )

    # rule 3: overlaps
    for pos, r in enumerate(spec.relations):
        if r.kind != OVERLAP or frozenset((r.left, r.right)) in suppressed:
            continue
        gi, gj = group_of[index[r.left]], group_of[index[r.right]]
        ci, cj = classes[index[r.left]], classes[index[r.right]]
        names = r.decomposition or (None, None, None)
        shared = _Element(
            len(elements), (min(gi, gj), 1, pos), f"{ci.name}_and_{cj.name}",
            [(classes[i].dataset, classes[i].name) for i in members[gi] + members[gj]],
        )
        if names[1] is not None:
            shared.name_explicitly(names[1], r)
        elements.append(shared)
        for side, other, name in ((gi, cj, names[0]), (gj, ci, names[2])):
            if name is not None:
                own[side].name_explicitly(name, r)
            else:
                own[side].minus.append(other.name)
        li, lj = own[gi].uid, own[gj].uid
        for elems in mapping.values():
            if li in elems or lj in elems:
                elems.add(shared.uid)

    for gj, rels in exhausted.items():
        el = own[gj]
        el.alive = False
        for g, elems in mapping.items():
            elems.discard(el.uid)
            if not elems:
                raise InconsistencyError(
                    f"{classes[g].key} maps to nothing once {', '.join(map(str, rels))} "
                    f"declare it exhausted"
                )

    alive = sorted((e for e in elements if e.alive), key=lambda e: e.order)
    names = _resolve_names(alive, classes)
    ordered = tuple(
        ElementaryClass(names[e.uid], tuple(e.provenance)) for e in alive
    )
    rank = {e.uid: k for k, e in enumerate(alive)}
    class_mapping = {
        c.key: tuple(names[u] for u in sorted(mapping[group_of[i]], key=rank.__getitem__))
        for i, c in enumerate(classes)
    }
    tax = UniversalTaxonomy(ordered, class_mapping, classes)

    report = validate_taxonomy(tax, spec)
    if not report.ok:
        raise InconsistencyError(
            "relations are mutually inconsistent: "
            + "; ".join(str(v) for v in report.violations)
        )
    return tax


def _resolve_names(alive, classes):
    names = {}
    taken = {}
    for e in alive:
        if e.explicit is None:
            continue
        if e.explicit in taken:
            raise InconsistencyError(
                f"element name {e.explicit!r} is assigned to two distinct elements"
            )
        taken[e.explicit] = e.uid
        names[e.uid] = e.explicit
    for e in alive:
        if e.uid in names:
            continue
        hint = e.hint
        candidates = [hint]
        if e.provenance:
            candidates.append(f"{e.provenance[0][0]}_{hint}")
        name = next((c for c in candidates if c not in taken), None)
        k = 2
        while name is None:
            if f"{candidates[-1]}_{k}" not in taken:
                name = f"{candidates[-1]}_{k}"
            k += 1
        taken[name] = e.uid
        names[e.uid] = name
    return names


def build_taxonomy_from_text(text):
    return build_taxonomy(parse_relation_spec(text))


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    kind: str
    classes: tuple
    detail: str = ""

    def __str__(self):
        where = ", ".join(self.classes)
        return f"{self.kind} [{where}] {self.detail}".rstrip()


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def add(self, kind, classes, detail=""):
        self.violations.append(Violation(kind, tuple(classes), detail))

    def to_dict(self):
        return {
            "valid": self.ok,
            "violations": [
                {"kind": v.kind, "classes": list(v.classes), "detail": v.detail}
                for v in self.violations
            ],
        }


def validate_taxonomy(tax, spec):
    """Check ``tax`` against the structural invariants and every relation in ``spec``."""
    report = ValidationReport()

    counts = Counter(e.id for e in tax.elements)
    for eid, n in counts.items():
        if n > 1:
            report.add("duplicate-element", [], f"element id {eid!r} appears {n} times")
    known = set(counts)

    sets = {}
    for c in spec.classes:
        if c.key not in tax.mapping:
            report.add("missing-class", [c.key], "class has no mapping")
            continue
        ids = tax.mapping[c.key]
        unknown = [e for e in ids if e not in known]
        if unknown:
            report.add("unknown-element", [c.key], f"maps to undeclared {unknown}")
        if not ids:
            report.add("empty-mapping", [c.key])
        sets[c.key] = frozenset(ids)

    for ds, cls in spec.datasets.items():
        for a, b in combinations(cls, 2):
            if a.key in sets and b.key in sets and sets[a.key] & sets[b.key]:
                shared = sorted(sets[a.key] & sets[b.key])
                report.add("intra-dataset-overlap", [a.key, b.key], f"share {shared}")

    suppressed = _suppressed_pairs(spec)
    for r in spec.relations:
        if r.left not in sets or r.right not in sets:
            continue
        a, b = sets[r.left], sets[r.right]
        if r.kind in (EQUAL, FORCE_EQUAL):
            if a != b:
                report.add(r.kind.lower(), [r.left, r.right], "mappings differ")
        elif r.kind == SUBSET:
            if not a < b:
                report.add("subset", [r.left, r.right], "left is not a proper subset of right")
        elif r.kind == OVERLAP:
            if frozenset((r.left, r.right)) in suppressed:
                continue
            if not (a & b and a - b and b - a):
                report.add("overlap", [r.left, r.right], "mappings do not properly overlap")
        elif r.kind == FORCE_DISJOINT:
            if a & b:
                report.add("force-disjoint", [r.left, r.right], f"share {sorted(a & b)}")

    # classes may only share elements if some chain of relations links them
    links = DisjointSet(sets)
    for r in spec.relations:
        if r.kind != FORCE_DISJOINT and r.left in sets and r.right in sets:
            links.merge(r.left, r.right)
    holders = defaultdict(list)
    for key, ids in sets.items():
        for e in ids:
            holders[e].append(key)
    dataset_of = {c.key: c.dataset for c in spec.classes}
    for eid in tax.element_ids:
        for a, b in combinations(holders.get(eid, ()), 2):
            if dataset_of[a] != dataset_of[b] and not links.connected(a, b):
                report.add("unrelated-overlap", [a, b], f"share {eid!r} without any relation")
        if eid not in holders and eid in known:
            report.add("orphan-element", [], f"element {eid!r} is not used by any class")
    return report


def universal_class_count(tax):
    return len(tax.elements)


def element_signatures(tax):
    """Multiset of class-key sets, one per element; equal for set-isomorphic taxonomies."""
    holders = defaultdict(set)
    for key, ids in tax.mapping.items():
        for e in ids:
            holders[e].add(key)
    return Counter(frozenset(holders[e]) for e in tax.element_ids)


def isomorphic(a, b):
    return element_signatures(a) == element_signatures(b)
