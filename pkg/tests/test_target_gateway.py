import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metalforge.errors import (
    AccessDenied,
    AlreadyExported,
    ImageInUse,
    NotFound,
    OutOfBounds,
    ReadOnlyTarget,
    TargetGone,
)
from metalforge.target_gateway import (
    OP_READ,
    OP_WRITE,
    STATUS_OK,
    TargetMode,
    decode_request,
    decode_response,
    encode_read_request,
    encode_response,
    encode_write_request,
    parse_target_name,
)

BS = 4096
TENANT = "t1"


@pytest.fixture
def rig(stack):
    """Stack with an allocated, attached node and one exported image."""
    image = stack.images.import_image(TENANT, "base", random.Random(0).randbytes(16 * BS))
    node = stack.pool.allocate_node(TENANT)
    stack.pool.attach_network(node, TENANT)
    target = stack.gateway.create_target(TENANT, image, TargetMode.READ_WRITE, {node})
    return stack, image, node, target


class TestLifecycle:
    def test_create_marks_image_in_use(self, rig):
        stack, image, node, target = rig
        with pytest.raises(ImageInUse):
            stack.images.delete_image(TENANT, image)
        stack.gateway.delete_target(TENANT, target)
        stack.images.delete_image(TENANT, image)

    def test_single_writer_per_image(self, rig):
        stack, image, node, target = rig
        with pytest.raises(AlreadyExported):
            stack.gateway.create_target(TENANT, image, TargetMode.READ_WRITE, {node})

    def test_multiple_read_only_targets(self, rig):
        stack, image, node, target = rig
        ro1 = stack.gateway.create_target(TENANT, image, TargetMode.READ_ONLY, {node})
        ro2 = stack.gateway.create_target(TENANT, image, TargetMode.READ_ONLY, {node})
        assert ro1 != ro2 != target
        assert stack.gateway.target_read(node, ro1, 0, 8) == \
            stack.gateway.target_read(node, ro2, 0, 8)

    def test_name_parses_back_to_tenant_and_image(self, rig):
        stack, image, node, target = rig
        assert parse_target_name(target) == (TENANT, image)

    def test_io_after_delete_is_target_gone(self, rig):
        stack, image, node, target = rig
        stack.gateway.delete_target(TENANT, target)
        with pytest.raises(TargetGone):
            stack.gateway.target_read(node, target, 0, 1)
        with pytest.raises(TargetGone):
            stack.gateway.target_write(node, target, 0, b"\x00")

    def test_counters_snapshot_until_deletion(self, rig):
        stack, image, node, target = rig
        stack.gateway.target_read(node, target, 0, 100)
        assert stack.gateway.get_traffic(target).bytes_read == 100
        stack.gateway.delete_target(TENANT, target)
        with pytest.raises(NotFound):
            stack.gateway.get_traffic(target)

    def test_foreign_delete_denied(self, rig):
        stack, image, node, target = rig
        with pytest.raises(AccessDenied):
            stack.gateway.delete_target("t2", target)


class TestDataPath:
    def test_gateway_transparency(self, rig):
        stack, image, node, target = rig
        for offset, length in ((0, 1), (BS - 3, 7), (5 * BS, 2 * BS), (0, 16 * BS)):
            assert stack.gateway.target_read(node, target, offset, length) == \
                stack.images.read_range(image, offset, length)

    def test_write_visible_through_store(self, rig):
        stack, image, node, target = rig
        stack.gateway.target_write(node, target, 10, b"hello")
        assert stack.images.read_range(image, 10, 5) == b"hello"

    def test_counter_exactness(self, rig):
        stack, image, node, target = rig
        for _ in range(100):
            stack.gateway.target_write(node, target, 0, b"\x01" * 1024)
        counters = stack.gateway.get_traffic(target)
        assert counters.bytes_written == 100 * 1024
        assert counters.write_ops == 100
        for _ in range(7):
            stack.gateway.target_read(node, target, 0, 2048)
        counters = stack.gateway.get_traffic(target)
        assert counters.bytes_read == 7 * 2048
        assert counters.read_ops == 7

    def test_fresh_target_counters_zero(self, rig):
        stack, image, node, target = rig
        counters = stack.gateway.get_traffic(target)
        assert (counters.bytes_read, counters.bytes_written,
                counters.read_ops, counters.write_ops) == (0, 0, 0, 0)

    def test_read_of_unwritten_region_counts(self, rig):
        stack, image, node, target = rig
        zeros_target = stack.gateway.create_target(
            TENANT, stack.images.create_image(TENANT, "empty", 4 * BS),
            TargetMode.READ_WRITE, {node})
        assert stack.gateway.target_read(node, zeros_target, 0, BS) == bytes(BS)
        assert stack.gateway.get_traffic(zeros_target).bytes_read == BS

    def test_write_to_read_only_target(self, rig):
        stack, image, node, target = rig
        stack.gateway.delete_target(TENANT, target)
        ro = stack.gateway.create_target(TENANT, image, TargetMode.READ_ONLY, {node})
        with pytest.raises(ReadOnlyTarget):
            stack.gateway.target_write(node, ro, 0, b"\x00")
        assert stack.gateway.get_traffic(ro).write_ops == 0

    def test_out_of_bounds_read(self, rig):
        stack, image, node, target = rig
        with pytest.raises(OutOfBounds):
            stack.gateway.target_read(node, target, 16 * BS - 1, 2)
        assert stack.gateway.get_traffic(target).read_ops == 0


class TestAuthorization:
    def test_unlisted_initiator_denied(self, rig):
        stack, image, node, target = rig
        other = stack.pool.allocate_node("t2")
        stack.pool.attach_network(other, "t2")
        with pytest.raises(AccessDenied):
            stack.gateway.target_read(other, target, 0, 1)
        assert stack.gateway.get_traffic(target).read_ops == 0

    def test_detached_initiator_denied(self, rig):
        stack, image, node, target = rig
        stack.pool.detach_network(node)
        with pytest.raises(AccessDenied):
            stack.gateway.target_read(node, target, 0, 1)
        stack.pool.attach_network(node, TENANT)
        stack.gateway.target_read(node, target, 0, 1)

    def test_denied_requests_change_nothing(self, rig):
        stack, image, node, target = rig
        before = stack.images.export_image(TENANT, image)
        other = stack.pool.allocate_node("t2")
        stack.pool.attach_network(other, "t2")
        with pytest.raises(AccessDenied):
            stack.gateway.target_write(other, target, 0, b"\xff" * BS)
        counters = stack.gateway.get_traffic(target)
        assert counters.write_ops == 0 and counters.bytes_written == 0
        assert stack.images.export_image(TENANT, image) == before


class TestRebind:
    def test_rebind_swaps_backing_image(self, rig):
        stack, image, node, target = rig
        other = stack.images.import_image(TENANT, "other", b"\xab" * BS)
        stack.gateway.rebind_target(TENANT, target, other)
        assert stack.gateway.target_read(node, target, 0, BS) == b"\xab" * BS
        # old image is released, new one held
        stack.images.delete_image(TENANT, image)
        with pytest.raises(ImageInUse):
            stack.images.delete_image(TENANT, other)

    def test_rebind_preserves_counters(self, rig):
        stack, image, node, target = rig
        stack.gateway.target_read(node, target, 0, 64)
        other = stack.images.import_image(TENANT, "other", b"\x01" * BS)
        stack.gateway.rebind_target(TENANT, target, other)
        assert stack.gateway.get_traffic(target).bytes_read == 64


class TestConcurrency:
    def test_parallel_io_on_distinct_targets(self, rig):
        stack, image, node, target = rig
        nodes, targets = [node], [target]
        for i in range(5):
            stack.pool.register_node(f"02:00:00:00:10:{i:02x}")
        for i in range(5):
            img = stack.images.import_image(TENANT, f"img{i}", bytes([i + 1]) * 8 * BS)
            n = stack.pool.allocate_node(TENANT)
            stack.pool.attach_network(n, TENANT)
            targets.append(stack.gateway.create_target(TENANT, img, TargetMode.READ_WRITE, {n}))
            nodes.append(n)
        errors = []

        def hammer(n, t, marker):
            try:
                for k in range(40):
                    stack.gateway.target_write(n, t, (k % 8) * BS, bytes([marker]) * BS)
                    got = stack.gateway.target_read(n, t, (k % 8) * BS, BS)
                    assert got == bytes([marker]) * BS
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=hammer, args=(n, t, i + 10))
                   for i, (n, t) in enumerate(zip(nodes, targets))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []

    def test_fence_blocks_io(self, rig):
        stack, image, node, target = rig
        release = threading.Event()
        entered = threading.Event()
        results = []

        def fenced():
            with stack.gateway.fence(target):
                entered.set()
                release.wait(timeout=5)

        def reader():
            entered.wait(timeout=5)
            results.append(stack.gateway.target_read(node, target, 0, 4))

        holder = threading.Thread(target=fenced)
        probe = threading.Thread(target=reader)
        holder.start()
        probe.start()
        entered.wait(timeout=5)
        assert results == []  # reader is blocked behind the fence
        release.set()
        holder.join()
        probe.join()
        assert len(results) == 1


class TestWireFormat:
    def test_read_request_golden_bytes(self):
        frame = encode_read_request("iqn.2025-01.org.metalforge:t1:img-000001", 4096, 512)
        expect = (
            b"\x00\x00\x007"      # record length 55
            b"\x00"                # op=read
            b"\x00("               # name length 40
            b"iqn.2025-01.org.metalforge:t1:img-000001"
            b"\x00\x00\x00\x00\x00\x00\x10\x00"  # offset 4096
            b"\x00\x00\x02\x00"    # read length 512
        )
        assert frame == expect
        assert decode_request(frame) == {
            "op": OP_READ,
            "target": "iqn.2025-01.org.metalforge:t1:img-000001",
            "offset": 4096,
            "length": 512,
        }

    def test_write_request_golden_bytes(self):
        frame = encode_write_request("iqn.2025-01.org.metalforge:t1:img-000001", 8, b"\xca\xfe")
        expect = (
            b"\x00\x00\x005"      # record length 53
            b"\x01"                # op=write
            b"\x00("
            b"iqn.2025-01.org.metalforge:t1:img-000001"
            b"\x00\x00\x00\x00\x00\x00\x00\x08"
            b"\xca\xfe"
        )
        assert frame == expect
        req = decode_request(frame)
        assert req["op"] == OP_WRITE and req["payload"] == b"\xca\xfe"

    def test_response_golden_bytes(self):
        assert encode_response(STATUS_OK, b"data") == b"\x00\x00\x00\x05\x00data"
        assert decode_response(b"\x00\x00\x00\x05\x00data") == (STATUS_OK, b"data")

    @settings(max_examples=50, deadline=None)
    @given(offset=st.integers(0, 2**64 - 1), length=st.integers(0, 2**32 - 1),
           name=st.text(alphabet="abcdefghij.:x-", min_size=1, max_size=64))
    def test_read_request_roundtrip(self, offset, length, name):
        req = decode_request(encode_read_request(name, offset, length))
        assert req == {"op": OP_READ, "target": name, "offset": offset, "length": length}

    @settings(max_examples=50, deadline=None)
    @given(offset=st.integers(0, 2**64 - 1), payload=st.binary(max_size=256))
    def test_write_request_roundtrip(self, offset, payload):
        req = decode_request(encode_write_request("iqn.x:t:i", offset, payload))
        assert req["offset"] == offset and req["payload"] == payload

    def test_session_round_trip_and_errors(self, rig):
        stack, image, node, target = rig
        session = stack.gateway.session(node)
        session.write(target, 0, b"wire")
        assert session.read(target, 0, 4) == b"wire"
        status, payload = decode_response(
            session.submit(encode_read_request("iqn.2025-01.org.metalforge:t1:gone", 0, 1)))
        assert status != STATUS_OK and payload == b"TargetGone"
        with pytest.raises(TargetGone):
            session.read("iqn.2025-01.org.metalforge:t1:gone", 0, 1)
