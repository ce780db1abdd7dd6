"""Federated data gateways: gates, dataflows, resolution, wires, circuits and governance."""

import logging

from ioda.circuit import CircuitSpec, Edge, activate, verify
from ioda.core_model import (
    DataRecord,
    GateAddress,
    GateMetadata,
    Policy,
    PolicyEntry,
    Principal,
    Schema,
    SchemaField,
    canonical_json,
    format_address,
    parse_address,
)
from ioda.dataflow import Dataflow, Filter, Join, Project, Sort, Window, apply_dataflow, apply_operator
from ioda.errors import IodaError
from ioda.gate import Gate, GateSpec, IPortSpec, OPortSpec, create_gate
from ioda.governance import FederatedLedger, ProvenanceLedger, audit, check, trace
from ioda.resolution import DomainRegistry, PeeringTable, Selector, resolve, resolve_cross

logging.getLogger(__name__).addHandler(logging.NullHandler())

__version__ = "0.1.0"

__all__ = [
    "CircuitSpec",
    "DataRecord",
    "Dataflow",
    "DomainRegistry",
    "Edge",
    "FederatedLedger",
    "Filter",
    "Gate",
    "GateAddress",
    "GateMetadata",
    "GateSpec",
    "IPortSpec",
    "IodaError",
    "Join",
    "OPortSpec",
    "PeeringTable",
    "Policy",
    "PolicyEntry",
    "Principal",
    "Project",
    "ProvenanceLedger",
    "Schema",
    "SchemaField",
    "Selector",
    "Sort",
    "Window",
    "activate",
    "apply_dataflow",
    "apply_operator",
    "audit",
    "canonical_json",
    "check",
    "create_gate",
    "format_address",
    "parse_address",
    "resolve",
    "resolve_cross",
    "trace",
    "verify",
]
