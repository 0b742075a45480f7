"""Provenance export: a replica's actions, entries and checkpoints as a PROV dataset."""

from __future__ import annotations

from datetime import datetime, timezone
from pathlib import Path
from urllib.parse import quote, urlparse

from pyoxigraph import BlankNode, Literal, NamedNode, Quad, RdfFormat, Store

from .config import RDF_BASE_IRI
from .errors import InvalidValue, IoFailure
from .logging_config import logger
from .replica import Replica
from .signals import SignalKind
from .values import canonical_json, encode_value

RDF_TYPE = "http://www.w3.org/1999/02/22-rdf-syntax-ns#type"
RDFS_LABEL = "http://www.w3.org/2000/01/rdf-schema#label"
XSD_NS = "http://www.w3.org/2001/XMLSchema#"
PROV_NS = "http://www.w3.org/ns/prov#"
DCT_NS = "http://purl.org/dc/terms/"
INTERNAL_IRI_PREFIX = "http://internal.invalid/"

FORMATS = {
    "trig": (RdfFormat.TRIG, "trig"),
    "nquads": (RdfFormat.N_QUADS, "nq"),
    "ttl": (RdfFormat.TURTLE, "ttl"),
    "nt": (RdfFormat.N_TRIPLES, "nt"),
}
NO_NAMED_GRAPHS = {RdfFormat.TURTLE, RdfFormat.N_TRIPLES}


def vocab(base_iri: str) -> str:
    return f"{base_iri}vocab#"


def prefixes(base_iri: str) -> dict[str, str]:
    return {"prov": PROV_NS, "rdfs": "http://www.w3.org/2000/01/rdf-schema#", "xsd": XSD_NS, "dct": DCT_NS, "ts": vocab(base_iri)}


def safe_named_node(iri: str) -> NamedNode:
    """Quote an IRI; anything without a scheme lands under an internal prefix."""
    if not urlparse(iri).scheme:
        fallback = quote(iri, safe="")
        logger.warning(f"Replaced {iri} with {INTERNAL_IRI_PREFIX}{fallback}")
        return NamedNode(f"{INTERNAL_IRI_PREFIX}{fallback}")
    try:
        return NamedNode(quote(iri, safe=":/#?&=%"))
    except ValueError as e:
        logger.info(f"Invalid IRI replaced by a synthetic one: {iri} – {e}")
        return NamedNode(f"{INTERNAL_IRI_PREFIX}{quote(iri, safe='')}")


def timestamp_literal(wall_time_ms: int) -> Literal:
    moment = datetime.fromtimestamp(wall_time_ms / 1000, tz=timezone.utc)
    return Literal(moment.isoformat(timespec="milliseconds"), datatype=NamedNode(f"{XSD_NS}dateTime"))


def integer_literal(n: int) -> Literal:
    return Literal(str(n), datatype=NamedNode(f"{XSD_NS}integer"))


def build_provenance(replica: Replica, base_iri: str = RDF_BASE_IRI) -> tuple[Store, NamedNode]:
    """Actions become prov:Activity, entries prov:Entity generated by their action, checkpoints prov:Collection."""
    store = Store()
    graph = safe_named_node(f"{base_iri}trace/replica-{replica.id}")
    ts = vocab(base_iri)

    def node(kind: str, key: object) -> NamedNode:
        return safe_named_node(f"{base_iri}{kind}/{key}")

    def add(subject, predicate: str, obj) -> None:
        store.add(Quad(subject, NamedNode(predicate), obj, graph_name=graph))

    for signal in replica.graph.nodes():
        subject = node("signal", signal.id)
        add(subject, RDF_TYPE, NamedNode(f"{ts}Signal"))
        add(subject, RDFS_LABEL, Literal(signal.id))
        add(subject, f"{ts}kind", Literal(signal.kind.value))
        if signal.kind is SignalKind.derived:
            add(subject, f"{ts}compute", Literal(signal.compute))
            for dep in signal.deps:
                add(subject, f"{ts}dependsOn", node("signal", dep))

    for block in replica.blocks():
        subject = node("action", block.id)
        add(subject, RDF_TYPE, NamedNode(f"{PROV_NS}Activity"))
        add(subject, RDFS_LABEL, Literal(block.label))
        add(subject, f"{ts}kind", Literal(block.kind))
        add(subject, f"{ts}implicit", Literal(str(block.implicit).lower(), datatype=NamedNode(f"{XSD_NS}boolean")))
        add(subject, f"{ts}originReplica", integer_literal(block.origin_replica))
        add(subject, f"{PROV_NS}startedAtTime", timestamp_literal(block.started_at))
        if block.ended_at is not None:
            add(subject, f"{PROV_NS}endedAtTime", timestamp_literal(block.ended_at))
        if block.parent is not None:
            add(subject, f"{DCT_NS}isPartOf", node("action", block.parent))
        if block.inverse_of is not None:
            add(subject, f"{ts}undoes", node("action", block.inverse_of))
        if block.redo_of is not None:
            add(subject, f"{ts}redoes", node("action", block.redo_of))

    previous: dict[str, NamedNode] = {}
    for entry in replica.history:
        subject = node("entry", entry.stamp)
        add(subject, RDF_TYPE, NamedNode(f"{PROV_NS}Entity"))
        add(subject, f"{PROV_NS}specializationOf", node("signal", entry.signal))
        add(subject, f"{PROV_NS}wasGeneratedBy", node("action", entry.action))
        add(subject, f"{PROV_NS}generatedAtTime", timestamp_literal(entry.wall_time))
        add(subject, f"{ts}value", Literal(canonical_json(encode_value(entry.value))))
        add(subject, f"{ts}stamp", Literal(str(entry.stamp)))
        add(subject, f"{ts}branch", Literal(entry.branch))
        if entry.signal in previous:
            add(subject, f"{PROV_NS}wasRevisionOf", previous[entry.signal])
        previous[entry.signal] = subject

    for checkpoint in replica.checkpoints():
        subject = node("checkpoint", checkpoint.id)
        add(subject, RDF_TYPE, NamedNode(f"{PROV_NS}Collection"))
        add(subject, RDFS_LABEL, Literal(checkpoint.label))
        add(subject, f"{PROV_NS}generatedAtTime", timestamp_literal(checkpoint.created_at))
        add(subject, f"{ts}branch", Literal(checkpoint.branch))
        for _signal, stamp in sorted(checkpoint.frontier.items()):
            add(subject, f"{PROV_NS}hadMember", node("entry", stamp))

    for path in replica.list_paths():
        subject = node("path", path.id)
        add(subject, RDF_TYPE, NamedNode(f"{ts}ExplorationPath"))
        add(subject, RDFS_LABEL, Literal(path.label))
        for position, checkpoint_id in enumerate(path.steps):
            step = BlankNode()
            add(subject, f"{ts}step", step)
            add(step, f"{ts}position", integer_literal(position))
            add(step, f"{ts}checkpoint", node("checkpoint", checkpoint_id))

    logger.debug(f"Provenance graph for replica {replica.id}: {len(store)} quads")
    return store, graph


def export_provenance(
    replica: Replica,
    fmt: str = "trig",
    output: str | Path | None = None,
    base_iri: str = RDF_BASE_IRI,
) -> bytes | None:
    """Serialize the provenance graph; returns the bytes when ``output`` is None."""
    if fmt not in FORMATS:
        raise InvalidValue(f"unsupported export format {fmt!r}, expected one of {', '.join(FORMATS)}")
    rdf_format, _extension = FORMATS[fmt]
    store, graph = build_provenance(replica, base_iri)
    kwargs = {"from_graph": graph} if rdf_format in NO_NAMED_GRAPHS else {}
    if output is None:
        return store.dump(format=rdf_format, prefixes=prefixes(base_iri), **kwargs)
    try:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        store.dump(output=str(output), format=rdf_format, prefixes=prefixes(base_iri), **kwargs)
    except OSError as e:
        raise IoFailure(f"cannot write export {output}: {e}") from e
    logger.info(f"Exported {len(store)} quads to {output}")
    return None


def extension_for(fmt: str) -> str:
    return FORMATS[fmt][1]
