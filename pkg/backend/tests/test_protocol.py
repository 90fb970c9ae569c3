"""Protocol conformance for the backend server.

The byte-identity check compares the served masks against the in-process
oracle of the main package (a test-only dependency; the server itself
never imports it).
"""

import json
import subprocess
import sys

import numpy as np
import pytest

import tubetrace as tt
from tubetrace.volume import PlaneAxis

from tubetrace_backend import rle as backend_rle


def make_gt(rng, shape=(6, 20, 20), blobs=6):
    labels = np.zeros(shape, np.uint32)
    for cid in range(1, blobs + 1):
        z0 = int(rng.integers(0, shape[0] - 2))
        r0, c0 = (int(v) for v in rng.integers(0, 14, size=2))
        labels[z0 : z0 + 2, r0 : r0 + 5, c0 : c0 + 5] = cid
    return tt.LabelVolume(labels=labels)


class ServerProc:
    def __init__(self, model):
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "tubetrace_backend", "serve", "--model", model],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self.next_id = 0

    def send_raw(self, line: str) -> dict:
        self.proc.stdin.write(line + "\n")
        self.proc.stdin.flush()
        reply = self.proc.stdout.readline()
        assert reply, "server closed its stdout"
        return json.loads(reply)

    def request(self, op: str, **fields) -> dict:
        self.next_id += 1
        return self.send_raw(json.dumps({"id": self.next_id, "op": op, **fields}))

    def alive(self) -> bool:
        return self.proc.poll() is None

    def close(self):
        try:
            if self.alive():
                self.request("shutdown")
                self.proc.wait(timeout=3)
        except Exception:
            pass
        finally:
            if self.alive():
                self.proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def image_field(plane: np.ndarray) -> dict:
    import base64

    u8 = plane.astype(np.uint8)
    return {
        "rows": int(u8.shape[0]),
        "cols": int(u8.shape[1]),
        "b64": base64.b64encode(u8.tobytes()).decode("ascii"),
    }


@pytest.fixture(scope="module")
def gt_volume(tmp_path_factory):
    rng = np.random.default_rng(7)
    gt = make_gt(rng)
    path = tt.save_labels(gt, tmp_path_factory.mktemp("gt") / "gt.volj")
    return gt, path


class TestConformance:
    def test_init_capabilities(self, gt_volume):
        _, path = gt_volume
        with ServerProc(f"oracle:{path}") as server:
            reply = server.request("init", config={})
            assert reply["ok"] is True
            assert reply["capabilities"] == ["segment", "auto"]

    def test_echo_box(self):
        with ServerProc("echo") as server:
            server.request("init", config={})
            plane = np.zeros((8, 9), np.uint8)
            reply = server.request(
                "segment", image=image_field(plane), prompt={"point": [2, 2], "box": [1, 1, 3, 4]}
            )
            bits = backend_rle.decode(reply["mask"]["rle"], 8, 9)
            expected = np.zeros((8, 9), bool)
            expected[1:4, 1:5] = True
            assert np.array_equal(bits, expected)
            assert reply["prob"] == 0.9

    def test_rle_always_sums_to_pixels(self, gt_volume):
        gt, path = gt_volume
        rng = np.random.default_rng(8)
        with ServerProc(f"oracle:{path}") as server:
            server.request("init", config={})
            for _ in range(25):
                axis = PlaneAxis(int(rng.integers(0, 3)))
                index = int(rng.integers(0, gt.shape[axis]))
                plane = np.take(gt.labels, index, axis=int(axis))
                point = [int(rng.integers(0, plane.shape[0])), int(rng.integers(0, plane.shape[1]))]
                reply = server.request(
                    "segment", image=image_field(plane), prompt={"point": point, "box": None}
                )
                mask = reply["mask"]
                assert sum(mask["rle"]) == mask["rows"] * mask["cols"] == plane.size

    def test_ids_must_increase(self, gt_volume):
        _, path = gt_volume
        with ServerProc(f"oracle:{path}") as server:
            server.request("init", config={})
            reply = server.send_raw(json.dumps({"id": 1, "op": "init", "config": {}}))
            assert "error" in reply and "increase" in reply["error"]

    def test_unknown_op_is_error(self):
        with ServerProc("echo") as server:
            server.request("init", config={})
            reply = server.request("transmogrify")
            assert "error" in reply

    def test_shutdown_ok(self):
        server = ServerProc("echo")
        server.request("init", config={})
        reply = server.request("shutdown")
        assert reply["ok"] is True
        server.proc.wait(timeout=3)
        assert server.proc.returncode == 0

    def test_bad_model_exits_nonzero(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "tubetrace_backend", "serve", "--model", "oracle:/nope.volj"],
            input="",
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 2


class TestA10:
    def test_oracle_mode_byte_identical(self, gt_volume):
        """A10: 100 random requests served byte-for-byte like the
        in-process oracle, with and without the origin hint."""
        gt, path = gt_volume
        rng = np.random.default_rng(9)
        with ServerProc(f"oracle:{path}") as server:
            server.request("init", config={})
            for trial in range(100):
                axis = PlaneAxis(int(rng.integers(0, 3)))
                index = int(rng.integers(0, gt.shape[axis]))
                plane = np.take(gt.labels, index, axis=int(axis))
                point = [int(rng.integers(0, plane.shape[0])), int(rng.integers(0, plane.shape[1]))]
                fields = {"image": image_field(plane), "prompt": {"point": point, "box": None}}
                if trial % 2 == 0:
                    fields["origin"] = [axis.label, index]
                reply = server.request("segment", **fields)
                local = tt.oracle_segment(gt, axis, index, tt.Prompt(point=tuple(point)))
                expected_rle = backend_rle.encode(local.mask.bits)
                assert reply["mask"]["rle"] == expected_rle, f"trial {trial}"
                assert reply["prob"] == local.probability
        print("\nA10 oracle byte-identity: PASS (100 requests)")

    def test_malformed_requests_never_kill_process(self, gt_volume):
        """A10: 100 fuzzed lines all answered (or safely ignored), process
        alive and serving afterwards."""
        gt, path = gt_volume
        rng = np.random.default_rng(10)
        junk = [
            "not json at all",
            '{"id": "one", "op": "segment"}',
            '{"op": "segment"}',
            "[1, 2, 3]",
            '{"id": 0, "op": "init"}',
            '{"id": 999999, "op": "segment"}',
            '{"id": 1000000, "op": "segment", "image": {"rows": 4, "cols": 4, "b64": "!!"}}',
            '{"id": 1000001, "op": "segment", "image": {"rows": -1, "cols": 4, "b64": ""}}',
            '{"id": 1000002, "op": "auto", "image": null}',
            '{"id": 1000003, "op": "segment", "image": {"rows": 2, "cols": 2, "b64": "AAAAAA=="}}',
        ]
        with ServerProc(f"oracle:{path}") as server:
            server.request("init", config={})
            sent = 0
            for i in range(100):
                if i < len(junk):
                    line = junk[i]
                else:
                    length = int(rng.integers(1, 60))
                    chars = rng.integers(32, 127, size=length)
                    line = "".join(chr(c) for c in chars).replace("\n", " ")
                    if not line.strip():
                        line = "x"
                reply = server.send_raw(line)
                sent += 1
                assert server.alive()
                assert isinstance(reply, dict)
            assert sent == 100
            # still serving: a valid request beyond any fuzzed id succeeds
            server.next_id = 5_000_000
            plane = np.take(gt.labels, 0, axis=0)
            reply = server.request(
                "segment", image=image_field(plane), prompt={"point": [0, 0], "box": None}
            )
            assert "mask" in reply
        print("\nA10 malformed-request fuzzing: PASS (100 lines)")

    def test_via_external_segmenter_integration(self, gt_volume):
        """The main package's wire client, pointed at this server, matches
        the in-process oracle through the full segment() path."""
        gt, path = gt_volume
        gt_u8 = tt.Volume3D(data=gt.labels.astype(np.uint8))
        cmd = [sys.executable, "-m", "tubetrace_backend", "serve", "--model", f"oracle:{path}"]
        rng = np.random.default_rng(11)
        with tt.ExternalSegmenter(cmd) as backend:
            for _ in range(20):
                axis = PlaneAxis(int(rng.integers(0, 3)))
                index = int(rng.integers(0, gt.shape[axis]))
                image = tt.extract_plane(gt_u8, axis, index)
                point = (
                    int(rng.integers(0, image.shape[0])),
                    int(rng.integers(0, image.shape[1])),
                )
                wire = backend.segment(image, tt.Prompt(point=point))
                local = tt.oracle_segment(gt, axis, index, tt.Prompt(point=point))
                assert np.array_equal(wire.mask.bits, local.mask.bits)
                assert wire.probability == local.probability
