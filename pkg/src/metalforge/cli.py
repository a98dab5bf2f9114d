"""Operator and tenant command-line client.

Every command is a thin 1:1 mapping onto the JSON API. ``--api`` selects
the endpoint: an ``http://`` URL talks to a served stack, anything else is
treated as a persistence root opened in-process (the default mode for
single-host use and for the benchmark harness).
"""

import argparse
import base64
import json
import os
import sys
import urllib.error
import urllib.request

from .api import ApiServer, serve_http
from .bench import SCENARIOS, BenchSpec, run_bench
from .orchestrator import Orchestrator, StackConfig


class LocalClient:
    """In-process stack rooted at a directory."""

    def __init__(self, root: str, token: str | None):
        self.svc = Orchestrator.open(root)
        self.api = ApiServer(self.svc)
        self.token = token

    def request(self, method: str, path: str, body: dict | None = None):
        return self.api.handle(method, path, body, self.token)

    def close(self):
        self.svc.close()


class HttpClient:
    def __init__(self, base: str, token: str | None):
        self.base = base.rstrip("/")
        self.token = token

    def request(self, method: str, path: str, body: dict | None = None):
        data = json.dumps(body or {}).encode("utf-8")
        req = urllib.request.Request(self.base + path, data=data, method=method)
        req.add_header("Content-Type", "application/json")
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        try:
            with urllib.request.urlopen(req) as resp:
                return resp.status, json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            return exc.code, json.loads(exc.read().decode("utf-8"))

    def close(self):
        pass


def make_client(args) -> LocalClient | HttpClient:
    api = args.api or os.environ.get("METALFORGE_API") or os.environ.get("METALFORGE_ROOT")
    if not api:
        raise SystemExit("no API endpoint: pass --api or set METALFORGE_ROOT")
    if api.startswith("http://") or api.startswith("https://"):
        return HttpClient(api, args.token)
    return LocalClient(api, args.token)


def _body(args, **fields) -> dict:
    body = {k: v for k, v in fields.items() if v is not None}
    if args.tenant:
        body["tenant"] = args.tenant
    return body


def _emit(args, status: int, payload: dict, human=None) -> int:
    if status == 200:
        if args.json or human is None:
            print(json.dumps(payload, indent=2, sort_keys=True))
        else:
            human(payload)
        return 0
    code = payload.get("code", "InternalError")
    message = payload.get("message", "")
    step = payload.get("failing_step")
    detail = f" (failing step: {step})" if step else ""
    print(f"error {code}: {message}{detail}", file=sys.stderr)
    return 1


# -- command implementations ----------------------------------------------------


def cmd_image(args, client) -> int:
    if args.image_cmd == "upload":
        content = open(args.file, "rb").read()
        status, payload = client.request("POST", "/v1/images", _body(
            args, name=args.name,
            content_b64=base64.b64encode(content).decode("ascii")))
        return _emit(args, status, payload,
                     lambda p: print(f"image {p['id']} name={p['name']} "
                                     f"size={p['virtual_size']}"))
    if args.image_cmd == "list":
        status, payload = client.request("GET", "/v1/images", _body(args))

        def show(p):
            for rec in p["images"]:
                print(f"{rec['id']}  {rec['name']}  kind={rec['kind']} "
                      f"size={rec['virtual_size']} children={rec['child_count']}")
        return _emit(args, status, payload, show)
    if args.image_cmd == "share":
        status, payload = client.request(
            "POST", f"/v1/images/{args.name}/share", _body(args, grantee=args.grantee))
        return _emit(args, status, payload, lambda p: print("shared"))
    if args.image_cmd == "rename":
        status, payload = client.request(
            "POST", f"/v1/images/{args.name}/rename", _body(args, new_name=args.new_name))
        return _emit(args, status, payload, lambda p: print("renamed"))
    if args.image_cmd == "download":
        status, payload = client.request("GET", f"/v1/images/{args.name}/content",
                                         _body(args))
        if status == 200:
            with open(args.file, "wb") as fh:
                fh.write(base64.b64decode(payload["content_b64"]))
            if not args.json:
                print(f"wrote {args.file}")
                return 0
            payload = {"name": payload["name"], "path": args.file}
        return _emit(args, status, payload)
    raise SystemExit(2)


def cmd_node(args, client) -> int:
    status, payload = client.request("GET", "/v1/nodes", _body(args))

    def show(p):
        for n in p["nodes"]:
            owner = n["tenant"] or "-"
            print(f"{n['id']}  mac={n['mac']}  {n['pool_state']}  "
                  f"health={n['health']}  tenant={owner}")
    return _emit(args, status, payload, show)


def cmd_provision(args, client) -> int:
    status, payload = client.request("PUT", "/v1/provision", _body(
        args, image=args.image, node=args.node, idempotency_key=args.key))
    return _emit(args, status, payload,
                 lambda p: print(f"node {p['node']} state={p['state']} "
                                 f"clone={p['clone_image']} target={p['target']}"))


def cmd_deprovision(args, client) -> int:
    status, payload = client.request("DELETE", f"/v1/provision/{args.node}", _body(
        args, keep_image=args.keep_image, idempotency_key=args.key))
    return _emit(args, status, payload, lambda p: print(f"deprovisioned {args.node}"))


def cmd_snapshot(args, client) -> int:
    status, payload = client.request("PUT", f"/v1/snapshot/{args.node}",
                                     _body(args, name=args.name))
    return _emit(args, status, payload,
                 lambda p: print(f"snapshot image {p['image']}"))


def cmd_recover(args, client) -> int:
    status, payload = client.request("PUT", f"/v1/recover/{args.node}",
                                     _body(args, new_node=args.new_node))
    return _emit(args, status, payload,
                 lambda p: print(f"recovered onto {p['node']} state={p['state']}"))


def cmd_traffic(args, client) -> int:
    status, payload = client.request("GET", f"/v1/traffic/{args.node}", _body(args))
    return _emit(args, status, payload,
                 lambda p: print(f"read={p['bytes_read']}B/{p['read_ops']}ops "
                                 f"write={p['bytes_written']}B/{p['write_ops']}ops"))


def cmd_provisions(args, client) -> int:
    status, payload = client.request("GET", "/v1/provisions", _body(args))

    def show(p):
        for rec in p["provisions"]:
            print(f"{rec['node']}  state={rec['state']}  clone={rec['clone_image']} "
                  f"target={rec['target']}")
    return _emit(args, status, payload, show)


def cmd_bench(args) -> int:
    params = {}
    for item in args.param or []:
        key, _, value = item.partition("=")
        if not _:
            raise SystemExit(f"bad --param {item!r}, expected key=value")
        params[key] = _coerce(value)
    if args.root:
        params["root"] = args.root
    spec = BenchSpec(scenario=args.scenario, params=params, seed=args.seed,
                     output_path=args.out)
    result = run_bench(spec)
    print(result.summary)
    if args.out:
        print(f"csv written to {args.out}")
    else:
        sys.stdout.write(result.csv_text)
    return 0


def cmd_serve(args) -> int:
    tenants = None
    if args.tenant_token:
        tenants = {}
        for item in args.tenant_token:
            tenant, _, token = item.partition("=")
            if not _:
                raise SystemExit(f"bad --tenant-token {item!r}, expected tenant=token")
            tenants[tenant] = token
    root = args.root or os.environ.get("METALFORGE_ROOT")
    if not root:
        raise SystemExit("serve needs --root or METALFORGE_ROOT")
    svc = Orchestrator.open(root, StackConfig(tenants=tenants,
                                              admin_token=args.admin_token))
    server = serve_http(ApiServer(svc), args.host, args.port)
    print(f"serving {root} on http://{args.host}:{args.port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        svc.close()
    return 0


def _coerce(value: str):
    if "," in value:
        return [_coerce(v) for v in value.split(",") if v]
    for caster in (int, float):
        try:
            return caster(value)
        except ValueError:
            continue
    return value


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metalforge",
        description="diskless bare-metal provisioning client")
    parser.add_argument("--api", help="http(s) URL of a served stack, or a "
                                      "persistence root to open in-process")
    parser.add_argument("--tenant", help="tenant id for this call")
    parser.add_argument("--token", help="API token")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    image = sub.add_parser("image", help="image management")
    image_sub = image.add_subparsers(dest="image_cmd", required=True)
    up = image_sub.add_parser("upload")
    up.add_argument("name")
    up.add_argument("file")
    image_sub.add_parser("list")
    share = image_sub.add_parser("share")
    share.add_argument("name")
    share.add_argument("grantee")
    rename = image_sub.add_parser("rename")
    rename.add_argument("name")
    rename.add_argument("new_name")
    down = image_sub.add_parser("download")
    down.add_argument("name")
    down.add_argument("file")

    node = sub.add_parser("node", help="node pool")
    node_sub = node.add_subparsers(dest="node_cmd", required=True)
    node_sub.add_parser("list")

    prov = sub.add_parser("provision", help="stand a node up from an image")
    prov.add_argument("--image", required=True)
    prov.add_argument("--node")
    prov.add_argument("--key", help="idempotency key")

    deprov = sub.add_parser("deprovision", help="tear a node down")
    deprov.add_argument("node")
    deprov.add_argument("--keep-image", action="store_true")
    deprov.add_argument("--key", help="idempotency key")

    snap = sub.add_parser("snapshot", help="freeze a node's disk as an image")
    snap.add_argument("node")
    snap.add_argument("name")

    rec = sub.add_parser("recover", help="re-export a failed node's disk")
    rec.add_argument("node")
    rec.add_argument("--new-node")

    traffic = sub.add_parser("traffic", help="gateway counters for a node")
    traffic.add_argument("node")

    sub.add_parser("provisions", help="list live provision records")

    bench = sub.add_parser("bench", help="run a benchmark scenario")
    bench.add_argument("scenario", choices=SCENARIOS)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", help="CSV output path")
    bench.add_argument("--param", action="append", help="scenario param key=value")
    bench.add_argument("--root", help="run in this (empty) directory")

    serve = sub.add_parser("serve", help="serve a stack over HTTP")
    serve.add_argument("--root")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=7420)
    serve.add_argument("--tenant-token", action="append",
                       help="tenant=token (repeatable); enables auth")
    serve.add_argument("--admin-token")
    return parser


_CLIENT_COMMANDS = {
    "provision": cmd_provision,
    "deprovision": cmd_deprovision,
    "snapshot": cmd_snapshot,
    "recover": cmd_recover,
    "traffic": cmd_traffic,
    "provisions": cmd_provisions,
    "node": cmd_node,
    "image": cmd_image,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "bench":
        return cmd_bench(args)
    if args.command == "serve":
        return cmd_serve(args)
    client = make_client(args)
    try:
        return _CLIENT_COMMANDS[args.command](args, client)
    finally:
        client.close()


if __name__ == "__main__":
    sys.exit(main())
