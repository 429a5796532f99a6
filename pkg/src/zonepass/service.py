"""HTTP reservation service over one zone ledger.

Endpoints (JSON bodies):
  POST /zones/{z}/requests          submit an entry application
  POST /offers/{id}/accept          take one of the offered slots
  POST /offers/{id}/decline         release every offered slot
  GET  /zones/{z}/availability      per-slot density / feasibility / bunker view
  GET  /zones/{z}/metrics           decision counters and peak projected density
  PUT  /zones/{z}/policy            operator policy update
  GET  /healthz

Every ledger mutation runs under a single writer lock and is appended to
the event log (fsync) before the response leaves, so a crash never loses
an acknowledged decision and `replay` reproduces the live ledger exactly.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

from fastapi import FastAPI, Request as HttpRequest
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import eventlog
from .admission import (
    OFFER,
    Decision,
    accept_offer,
    decision_to_json,
    decline_offer,
    evaluate_request,
    expire_offers,
    feasible_free,
)
from .errors import (
    NotInOffer,
    OfferExpired,
    OutOfHorizon,
    RejectSpec,
    StaleDecision,
    UnknownZone,
    ZonepassError,
)
from .eventlog import EventLog
from .ledger import (
    Ledger,
    Request,
    ZonePolicy,
    projected_density,
    record_decision,
    zone_policy_from_json,
    zone_policy_to_json,
)

RECORD_RETRIES = 3

ENV_CONFIG = "ZONEPASS_CONFIG"
ENV_LISTEN = "ZONEPASS_LISTEN"


@dataclass(frozen=True)
class ServiceConfig:
    listen: str = "127.0.0.1:8000"
    zone_policy_file: str = "zone.json"
    offer_ttl_s: float = 300.0
    event_log_path: str = "events.jsonl"
    mode_override: str | None = None

    def validate(self) -> None:
        if not self.offer_ttl_s > 0.0:
            raise RejectSpec(f"offer TTL must be > 0, got {self.offer_ttl_s}")

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)


def load_config(path: str | Path | None = None) -> ServiceConfig:
    """Read the config file; ZONEPASS_CONFIG / ZONEPASS_LISTEN override."""
    path = os.environ.get(ENV_CONFIG, path)
    if path is None:
        raise RejectSpec("no config path given and ZONEPASS_CONFIG unset")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    base = Path(path).parent
    cfg = ServiceConfig(
        listen=os.environ.get(ENV_LISTEN, doc.get("listen", "127.0.0.1:8000")),
        zone_policy_file=str(base / doc["zone_policy_file"]),
        offer_ttl_s=float(doc.get("offer_ttl_s", 300.0)),
        event_log_path=str(base / doc.get("event_log", "events.jsonl")),
        mode_override=doc.get("mode_override"),
    )
    cfg.validate()
    return cfg


class ReservationService:
    """Shared state behind the app: one ledger, one log, one writer lock."""

    def __init__(self, config: ServiceConfig, policy: ZonePolicy | None = None):
        config.validate()
        self.config = config
        if policy is None:
            with open(config.zone_policy_file, encoding="utf-8") as fh:
                policy = zone_policy_from_json(json.load(fh))
        if config.mode_override:
            policy = replace(policy, mode=config.mode_override)
            policy.validate()
        self.lock = threading.Lock()
        self.counters = dict.fromkeys(
            ("requests", "grants", "offers", "accepts", "declines", "paid", "rejects"), 0
        )
        log_path = Path(config.event_log_path)
        if log_path.exists() and log_path.stat().st_size > 0:
            self.ledger = eventlog.replay(log_path)
            self.log = EventLog(log_path)
        else:
            self.ledger = Ledger(policy)
            self.log = EventLog(log_path)
            self.log.append(
                eventlog.KIND_POLICY_CHANGE, {"policy": zone_policy_to_json(policy)}
            )
        recovered = [
            int(c.request_id[1:])
            for c in self.ledger.coupons.values()
            if c.request_id.startswith("q") and c.request_id[1:].isdigit()
        ]
        self._next_request = max(recovered, default=0) + 1

    # -- helpers -------------------------------------------------------------

    def _mint_request_id(self) -> str:
        rid = f"q{self._next_request}"
        self._next_request += 1
        return rid

    def _expire(self, now: float) -> None:
        for offer_id in expire_offers(self.ledger, now):
            self.log.append(
                eventlog.KIND_DECLINE, {"offer_id": offer_id, "cause": "expired"}, ts=now
            )

    def _check_zone(self, zone_id: str) -> None:
        if zone_id != self.ledger.policy.zone_id:
            raise UnknownZone(f"unknown zone {zone_id!r}")

    # -- operations (called under the lock) -----------------------------------

    def submit(self, zone_id: str, body: dict) -> Decision:
        self._check_zone(zone_id)
        now = time.time()
        self._expire(now)
        policy = self.ledger.policy
        desired_slot = body.get("desired_slot")
        desired_time = body.get("desired_time_s")
        if desired_slot is None and desired_time is None:
            raise RejectSpec("body needs desired_slot or desired_time_s")
        request = Request(
            request_id=str(body.get("request_id") or self._mint_request_id()),
            zone_id=zone_id,
            desired_slot=None if desired_slot is None else int(desired_slot),
            desired_time_s=None if desired_time is None else float(desired_time),
            flexibility_s=float(body.get("flexibility_s", policy.flexibility_default_s)),
            willing_to_pay=bool(body.get("willing_to_pay", False)),
            # bookings happen ahead of the horizon clock unless stated
            submitted_at=float(body.get("submitted_at", -1.0)),
        )
        self.log.append(
            eventlog.KIND_REQUEST,
            {
                "request_id": request.request_id,
                "zone_id": zone_id,
                "desired_slot": request.desired_slot,
                "desired_time_s": request.desired_time_s,
                "flexibility_s": request.flexibility_s,
                "willing_to_pay": request.willing_to_pay,
                "submitted_at": request.submitted_at,
            },
            ts=now,
        )
        decision = None
        for _ in range(RECORD_RETRIES):
            decision = evaluate_request(
                request, self.ledger, ttl_s=self.config.offer_ttl_s, now=now
            )
            try:
                record_decision(self.ledger, decision)
                break
            except StaleDecision:
                decision = None
        if decision is None:
            raise StaleDecision("write conflict persisted after bounded retries")
        self.log.append(eventlog.KIND_DECISION, decision_to_json(decision), ts=now)
        self.counters["requests"] += 1
        key = {
            "GRANT": "grants",
            "OFFER": "offers",
            "PAID_GRANT": "paid",
            "REJECT": "rejects",
        }[decision.kind]
        self.counters[key] += 1
        return decision

    def respond(self, offer_id: str, accept: bool, slot_index: int | None) -> Decision | None:
        now = time.time()
        self._expire(now)
        if accept:
            decision = accept_offer(self.ledger, offer_id, int(slot_index), now=now)
            self.log.append(
                eventlog.KIND_ACCEPT,
                {"offer_id": offer_id, "slot_index": int(slot_index), "now": now},
                ts=now,
            )
            self.counters["accepts"] += 1
            return decision
        decline_offer(self.ledger, offer_id)
        self.log.append(eventlog.KIND_DECLINE, {"offer_id": offer_id, "cause": "declined"}, ts=now)
        self.counters["declines"] += 1
        return None

    def availability(self, zone_id: str) -> dict:
        self._check_zone(zone_id)
        ledger = self.ledger
        policy = ledger.policy
        probe = Request("probe", zone_id, desired_slot=0, submitted_at=-1.0)
        slots = []
        for i in range(policy.horizon_slots):
            slot = policy.slot(i)
            slots.append(
                {
                    "slot_index": i,
                    "start_s": slot.start,
                    "end_s": slot.end,
                    "projected_density": projected_density(ledger, i),
                    "free_feasible": feasible_free(slot, ledger, probe),
                    "bunker_remaining": ledger.bunker_budget(i),
                }
            )
        return {
            "zone_id": zone_id,
            "mode": policy.mode,
            "rho_free": policy.rho_free,
            "rho_hard": policy.rho_hard,
            "capacity": policy.capacity,
            "slot_length_s": policy.slot_length_s,
            "slots": slots,
            "ledger_version": ledger.version,
        }

    def metrics(self, zone_id: str) -> dict:
        self._check_zone(zone_id)
        peak = max(
            projected_density(self.ledger, i)
            for i in range(self.ledger.policy.horizon_slots)
        )
        return {
            "zone_id": zone_id,
            **self.counters,
            "peak_projected_density": peak,
            "ledger_version": self.ledger.version,
        }

    def update_policy(self, zone_id: str, body: dict) -> dict:
        self._check_zone(zone_id)
        current = self.ledger.policy
        merged = zone_policy_to_json(current)
        merged.update(body)
        candidate = zone_policy_from_json(merged)
        structural = (
            candidate.slot_length_s != current.slot_length_s
            or candidate.horizon_slots != current.horizon_slots
        )
        if structural and self.ledger.has_reserving_coupons():
            raise StaleDecision(
                "slot length and horizon are immutable while coupons are outstanding"
            )
        self.ledger.swap_policy(candidate)
        self.log.append(
            eventlog.KIND_POLICY_CHANGE, {"policy": zone_policy_to_json(candidate)}
        )
        return {"ok": True, "ledger_version": self.ledger.version}


def build_app(config: ServiceConfig, policy: ZonePolicy | None = None) -> FastAPI:
    service = ReservationService(config, policy)
    app = FastAPI(title="zonepass reservation service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.service = service

    def error_response(exc: ZonepassError, status: int) -> JSONResponse:
        return JSONResponse({"error": exc.code, "detail": str(exc)}, status_code=status)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "zone": service.ledger.policy.zone_id}

    @app.post("/zones/{zone_id}/requests")
    async def submit_request(zone_id: str, http_request: HttpRequest):
        try:
            body = await http_request.json()
            if not isinstance(body, dict):
                raise ValueError("body must be a JSON object")
        except ValueError as exc:
            return JSONResponse({"error": "MALFORMED", "detail": str(exc)}, status_code=400)
        try:
            with service.lock:
                decision = service.submit(zone_id, body)
        except UnknownZone as exc:
            return error_response(exc, 404)
        except (RejectSpec, OutOfHorizon, ValueError, TypeError) as exc:
            return JSONResponse({"error": "MALFORMED", "detail": str(exc)}, status_code=400)
        except StaleDecision as exc:
            return error_response(exc, 409)
        return decision_to_json(decision)

    @app.post("/offers/{offer_id}/accept")
    async def accept(offer_id: str, http_request: HttpRequest):
        try:
            body = await http_request.json()
            slot_index = int(body["slot_index"])
        except (ValueError, KeyError, TypeError) as exc:
            return JSONResponse({"error": "MALFORMED", "detail": str(exc)}, status_code=400)
        try:
            with service.lock:
                decision = service.respond(offer_id, True, slot_index)
        except OfferExpired as exc:
            return error_response(exc, 410)
        except NotInOffer as exc:
            return error_response(exc, 404)
        return decision_to_json(decision)

    @app.post("/offers/{offer_id}/decline")
    def decline(offer_id: str):
        try:
            with service.lock:
                service.respond(offer_id, False, None)
        except OfferExpired as exc:
            return error_response(exc, 410)
        except NotInOffer as exc:
            return error_response(exc, 404)
        return {"ok": True}

    @app.get("/zones/{zone_id}/availability")
    def availability(zone_id: str):
        try:
            with service.lock:
                return service.availability(zone_id)
        except UnknownZone as exc:
            return error_response(exc, 404)

    @app.get("/zones/{zone_id}/metrics")
    def zone_metrics(zone_id: str):
        try:
            with service.lock:
                return service.metrics(zone_id)
        except UnknownZone as exc:
            return error_response(exc, 404)

    @app.put("/zones/{zone_id}/policy")
    async def update_policy(zone_id: str, http_request: HttpRequest):
        try:
            body = await http_request.json()
            if not isinstance(body, dict):
                raise ValueError("body must be a JSON object")
        except ValueError as exc:
            return JSONResponse({"error": "MALFORMED", "detail": str(exc)}, status_code=400)
        try:
            with service.lock:
                return service.update_policy(zone_id, body)
        except UnknownZone as exc:
            return error_response(exc, 404)
        except StaleDecision as exc:
            return error_response(exc, 409)
        except (RejectSpec, ValueError, TypeError, KeyError) as exc:
            return JSONResponse({"error": "INVALID_POLICY", "detail": str(exc)}, status_code=400)

    return app


def run_service(config: ServiceConfig) -> None:
    import uvicorn

    host, port = config.host_port
    uvicorn.run(build_app(config), host=host, port=port)
