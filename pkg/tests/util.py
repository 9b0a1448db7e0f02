"""Shared builders for the test suite."""

import numpy as np

from nexusrcl.core import TimeWindow, host, service
from nexusrcl.graphs import HetGraphCase


def random_case(rng, n_services=3, n_hosts=2, f_s=4, f_h=3, case_id="case-0000", edge_p=0.5, window_index=0):
    services = tuple(service(f"s{i}") for i in range(n_services))
    hosts = tuple(host(f"h{i}") for i in range(n_hosts))
    e_ss = tuple(
        (i, j)
        for i in range(n_services)
        for j in range(n_services)
        if i != j and rng.random() < edge_p
    )
    e_sh = tuple((i, int(rng.integers(0, n_hosts))) for i in range(n_services))
    e_hh = tuple(
        (i, j) for i in range(n_hosts) for j in range(n_hosts) if i != j and rng.random() < edge_p
    )
    return HetGraphCase(
        case_id=case_id,
        window=TimeWindow(window_index * 10, (window_index + 1) * 10, window_index),
        services=services,
        hosts=hosts,
        e_ss=e_ss,
        e_sh=e_sh,
        e_hh=e_hh,
        service_features=rng.normal(size=(n_services, f_s)),
        host_features=rng.normal(size=(n_hosts, f_h)),
    )


def case_family(rng, n_cases, signature, case_ids=None, **kw):
    """Cases sharing one topology whose features follow `signature(rng, i)`."""
    base = random_case(rng, **kw)
    cases = []
    for i in range(n_cases):
        feats_s, feats_h = signature(rng, i)
        cases.append(
            HetGraphCase(
                case_id=case_ids[i] if case_ids else f"case-{i:04d}",
                window=TimeWindow(i * 10, (i + 1) * 10, i),
                services=base.services,
                hosts=base.hosts,
                e_ss=base.e_ss,
                e_sh=base.e_sh,
                e_hh=base.e_hh,
                service_features=feats_s,
                host_features=feats_h,
            )
        )
    return cases
