import struct

import numpy as np
import pytest

from spikesparse.event_io import (
    OFF,
    ON,
    BinaryVoxelGrid,
    DatasetIndexError,
    EventParseError,
    EventStream,
    FormatError,
    PartialReadError,
    build_voxel_grid,
    encode_aedat,
    load_dvs128,
    parse_aedat,
    parse_portable_events,
    serialize_portable_events,
    split_dvs128,
    synth_dataset,
)


# --- reference encoder (independent of the package serializer) -------------

def ref_polarity_packet(events, overflow=0, valid_bits=None):
    head = struct.pack("<hhiiiiii", 1, 0, 8, 4, overflow,
                       len(events), len(events), len(events))
    body = b""
    for i, (t, x, y, p) in enumerate(events):
        valid = 1 if valid_bits is None else valid_bits[i]
        data = (x << 17) | (y << 2) | (p << 1) | valid
        body += struct.pack("<Ii", data, t)
    return head + body


def ref_aedat(*packets):
    return b"#!AER-DAT3.1\r\n" + b"#!END-HEADER\r\n" + b"".join(packets)


class TestParseAedat:
    def test_single_on_event(self):
        data = ref_aedat(ref_polarity_packet([(100, 5, 7, ON)]))
        stream = parse_aedat(data)
        assert len(stream) == 1
        ev = stream[0]
        # timestamps are rebased to the first event
        assert (ev.timestamp, ev.x, ev.y, ev.polarity) == (0, 5, 7, ON)

    def test_rebase_keeps_offsets(self):
        data = ref_aedat(ref_polarity_packet([(1000, 1, 1, ON), (1250, 2, 2, OFF)]))
        stream = parse_aedat(data)
        assert stream.timestamps.tolist() == [0, 250]
        raw = parse_aedat(data, rebase=False)
        assert raw.timestamps.tolist() == [1000, 1250]

    def test_header_only_is_empty_stream(self):
        stream = parse_aedat(ref_aedat())
        assert len(stream) == 0 and stream.duration == 0

    def test_out_of_order_packets_are_sorted(self):
        events = [(500, 1, 1, ON), (100, 2, 2, OFF), (300, 3, 3, ON), (200, 4, 4, ON)]
        data = ref_aedat(ref_polarity_packet(events[:2]),
                         ref_polarity_packet(events[2:]))
        stream = parse_aedat(data, rebase=False)
        # oracle: plain sort of the reference list
        want = sorted(t for t, *_ in events)
        assert stream.timestamps.tolist() == want

    def test_invalid_events_dropped(self):
        data = ref_aedat(ref_polarity_packet(
            [(10, 1, 1, ON), (20, 2, 2, ON)], valid_bits=[1, 0]))
        assert len(parse_aedat(data)) == 1

    def test_timestamp_overflow_field(self):
        data = ref_aedat(ref_polarity_packet([(7, 1, 1, ON)], overflow=1))
        stream = parse_aedat(data, rebase=False)
        assert stream.timestamps.tolist() == [(1 << 31) + 7]

    def test_bad_magic(self):
        with pytest.raises(FormatError) as e:
            parse_aedat(b"#!AER-DAT2.0\r\n")
        assert e.value.field == "version"
        with pytest.raises(FormatError):
            parse_aedat(b"RIFF....")

    def test_truncated_packet_header(self):
        data = ref_aedat()[:len(ref_aedat())] + b"\x01\x00"
        with pytest.raises(PartialReadError) as e:
            parse_aedat(data)
        assert e.value.byte_offset == len(ref_aedat())

    def test_truncated_payload(self):
        whole = ref_aedat(ref_polarity_packet([(1, 1, 1, ON), (2, 2, 2, ON)]))
        with pytest.raises(PartialReadError):
            parse_aedat(whole[:-4])

    def test_skips_unknown_packet_types(self):
        # special event packet (type 0), 8-byte records
        other = struct.pack("<hhiiiiii", 0, 0, 8, 4, 0, 1, 1, 1) + b"\x00" * 8
        data = ref_aedat(other, ref_polarity_packet([(5, 1, 2, ON)]))
        assert len(parse_aedat(data)) == 1


class TestAedatRoundTrip:
    def test_parse_serialize_parse_identity(self):
        rng = np.random.default_rng(0)
        n = 200
        stream = EventStream(np.sort(rng.integers(0, 10_000, n)),
                             rng.integers(0, 128, n), rng.integers(0, 128, n),
                             rng.integers(0, 2, n), 128, 128).rebased()
        once = parse_aedat(encode_aedat(stream))
        assert once.equals(stream)
        twice = parse_aedat(encode_aedat(once))
        assert twice.equals(once)


class TestPortableFormat:
    def test_single_on_event(self):
        stream = parse_portable_events("128,128\n100,5,7,1\n")
        assert len(stream) == 1 and stream[0] == stream[0].__class__(0, 5, 7, ON)

    def test_empty_body(self):
        stream = parse_portable_events("64,48\n")
        assert len(stream) == 0 and (stream.width, stream.height) == (64, 48)

    def test_bad_polarity_reports_line(self):
        with pytest.raises(EventParseError) as e:
            parse_portable_events("128,128\n1,2,3,1\n4,5,6,2\n")
        assert e.value.line == 3

    def test_non_numeric_field_reports_line(self):
        with pytest.raises(EventParseError) as e:
            parse_portable_events("128,128\n10,x,3,1\n")
        assert e.value.line == 2

    def test_out_of_bounds_rejected(self):
        with pytest.raises(EventParseError):
            parse_portable_events("16,16\n5,16,0,1\n")

    def test_round_trip_identity(self, tmp_path):
        rng = np.random.default_rng(1)
        n = 64
        stream = EventStream(np.sort(rng.integers(0, 5_000, n)),
                             rng.integers(0, 32, n), rng.integers(0, 24, n),
                             rng.integers(0, 2, n), 32, 24).rebased()
        text = serialize_portable_events(stream)
        assert parse_portable_events(text).equals(stream)
        p = tmp_path / "events.txt"
        p.write_text(text)
        assert parse_portable_events(p).equals(stream)


class TestBuildVoxelGrid:
    def test_bin_index_is_floor(self):
        stream = EventStream([25_000], [3], [4], [ON], 16, 16)
        grid = build_voxel_grid(stream, 10_000, 15)
        assert grid.n_nonzero == 1
        assert (grid.t[0], grid.x[0], grid.y[0], grid.values[0]) == (2, 3, 4, 1)

    def test_events_are_not_summed(self):
        stream = EventStream([3_000, 7_000], [5, 5], [5, 5], [ON, ON], 16, 16)
        grid = build_voxel_grid(stream, 10_000, 4)
        assert grid.n_nonzero == 1 and grid.values[0] == 1

    def test_off_event_is_minus_one(self):
        grid = build_voxel_grid(EventStream([0], [0], [0], [OFF], 8, 8), 1_000, 4)
        assert grid.values.tolist() == [-1]

    def test_collision_latest_polarity_wins(self):
        on_then_off = EventStream([100, 900], [2, 2], [2, 2], [ON, OFF], 8, 8)
        assert build_voxel_grid(on_then_off, 1_000, 2).values.tolist() == [-1]
        off_then_on = EventStream([100, 900], [2, 2], [2, 2], [OFF, ON], 8, 8)
        assert build_voxel_grid(off_then_on, 1_000, 2).values.tolist() == [1]

    def test_clip_drops_trailing_events(self):
        stream = EventStream([0, 19_999, 20_000, 30_000], [0, 1, 2, 3],
                             [0, 0, 0, 0], [ON] * 4, 8, 8)
        grid = build_voxel_grid(stream, 10_000, 2, clip_us=20_000)
        assert grid.n_nonzero == 2
        with pytest.raises(ValueError):
            build_voxel_grid(stream, 10_000, 2, clip_us=25_000)

    def test_empty_stream(self):
        grid = build_voxel_grid(EventStream.empty(8, 8), 1_000, 4)
        assert grid.n_nonzero == 0 and grid.sparsity() == 1.0

    def test_duplicate_events_never_change_grid(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(1, 60))
            ts = rng.integers(0, 40_000, n)
            xs, ys = rng.integers(0, 8, n), rng.integers(0, 8, n)
            ps = rng.integers(0, 2, n)
            base = EventStream(ts, xs, ys, ps, 8, 8)
            grid = build_voxel_grid(base, 10_000, 4)
            i = int(rng.integers(n))
            dup = EventStream(np.r_[ts, ts[i]], np.r_[xs, xs[i]],
                              np.r_[ys, ys[i]], np.r_[ps, ps[i]], 8, 8)
            assert build_voxel_grid(dup, 10_000, 4).equals(grid)

    def test_nonzeros_bounded_by_clipped_events(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            n = int(rng.integers(0, 100))
            stream = EventStream(rng.integers(0, 50_000, n), rng.integers(0, 8, n),
                                 rng.integers(0, 8, n), rng.integers(0, 2, n), 8, 8)
            grid = build_voxel_grid(stream, 10_000, 3)
            assert grid.n_nonzero <= int((stream.timestamps < 30_000).sum())

    def test_every_nonzero_bin_backed_by_an_event(self):
        rng = np.random.default_rng(7)
        n = 200
        stream = EventStream(rng.integers(0, 40_000, n), rng.integers(0, 8, n),
                             rng.integers(0, 8, n), rng.integers(0, 2, n), 8, 8)
        grid = build_voxel_grid(stream, 10_000, 4)
        cells = {(int(t) * 100_000 + int(x) * 100 + int(y))
                 for t, x, y in zip(stream.timestamps // 10_000, stream.xs, stream.ys)}
        for t, x, y in zip(grid.t, grid.x, grid.y):
            assert int(t) * 100_000 + int(x) * 100 + int(y) in cells


class TestVoxelCacheFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        n = 50
        stream = EventStream(rng.integers(0, 100_000, n), rng.integers(0, 32, n),
                             rng.integers(0, 32, n), rng.integers(0, 2, n), 32, 32)
        grid = build_voxel_grid(stream, 10_000, 10)
        assert BinaryVoxelGrid.from_bytes(grid.to_bytes()).equals(grid)
        p = tmp_path / "g.vox"
        grid.save(p)
        assert BinaryVoxelGrid.load(p).equals(grid)

    def test_bad_magic_and_truncation(self):
        grid = build_voxel_grid(EventStream([5], [1], [1], [ON], 8, 8), 1_000, 2)
        blob = grid.to_bytes()
        with pytest.raises(FormatError):
            BinaryVoxelGrid.from_bytes(b"XXXXXXXX" + blob[8:])
        with pytest.raises(PartialReadError):
            BinaryVoxelGrid.from_bytes(blob[:-3])


class TestSplitDvs128:
    def test_boundary_subjects(self):
        idx = split_dvs128(["user23_led.aedat", "user24_fluorescent.aedat"])
        assert [r.subject for r in idx.train] == [23]
        assert [r.subject for r in idx.test] == [24]
        assert idx.train[0].illumination == "led"

    def test_unknown_subject_rejected(self):
        with pytest.raises(DatasetIndexError):
            split_dvs128(["user30_led.aedat"])
        with pytest.raises(DatasetIndexError):
            split_dvs128(["sample_led.aedat"])

    def test_labels_and_comments(self):
        idx = split_dvs128("# index\nuser01_natural.aedat,3\n\nuser25_led.aedat,7,led\n")
        assert idx.train[0].label == 3 and idx.test[0].label == 7


class TestSynthDataset:
    def test_deterministic_and_balanced(self):
        a_train, a_test = synth_dataset(4, 3, 32, 32, 10, 10_000, seed=9,
                                        test_per_class=2)
        b_train, b_test = synth_dataset(4, 3, 32, 32, 10, 10_000, seed=9,
                                        test_per_class=2)
        assert len(a_train) == 12 and len(a_test) == 8
        for (ga, la), (gb, lb) in zip(a_train + a_test, b_train + b_test):
            assert la == lb and ga.to_bytes() == gb.to_bytes()
        for cls in range(4):
            assert sum(1 for _, l in a_train if l == cls) == 3
            assert sum(1 for _, l in a_test if l == cls) == 2

    def test_train_and_test_are_disjoint_streams(self):
        train, test = synth_dataset(2, 2, 32, 32, 8, 10_000, seed=3)
        assert train[0][0].to_bytes() != test[0][0].to_bytes()

    def test_per_timestep_occupancy_cap(self):
        train, test = synth_dataset(4, 2, 64, 64, 20, 10_000, seed=1)
        cap = 0.05 * 64 * 64
        for grid, _ in train + test:
            assert grid.occupancy_per_timestep().max() <= cap

    def test_class_range_validated(self):
        with pytest.raises(ValueError):
            synth_dataset(1, 1, 16, 16, 4, 10_000, seed=0)


class TestLoadDvs128:
    @pytest.fixture
    def mini_root(self, tmp_path):
        rng = np.random.default_rng(11)
        for name, base in [("user01_led.aedat", 2_000_000),
                           ("user24_led.aedat", 5_000_000)]:
            events, labels = [], []
            for gi in range(2):
                start = base + gi * 3_000_000
                labels.append((gi + 1, start, start + 2_000_000))
                for _ in range(40):
                    events.append((start + int(rng.integers(0, 1_600_000)),
                                   int(rng.integers(0, 128)),
                                   int(rng.integers(0, 128)),
                                   int(rng.integers(0, 2))))
            events.sort()
            (tmp_path / name).write_bytes(ref_aedat(ref_polarity_packet(events)))
            lines = ["class,startTime_usec,endTime_usec"]
            lines += [f"{c},{s},{e}" for c, s, e in labels]
            (tmp_path / name.replace(".aedat", "_labels.csv")).write_text(
                "\n".join(lines) + "\n")
        (tmp_path / "trials_to_train.txt").write_text("user01_led.aedat\n")
        (tmp_path / "trials_to_test.txt").write_text("user24_led.aedat\n")
        return tmp_path

    def test_slices_gestures_by_annotation(self, mini_root):
        train, test = load_dvs128(mini_root, dt_us=100_000, n_timesteps=15)
        assert len(train) == 2 and len(test) == 2
        assert [l for _, l in train] == [0, 1]
        for grid, _ in train + test:
            assert grid.n_timesteps == 15 and grid.n_nonzero > 0

    def test_cache_round_trip(self, mini_root, tmp_path):
        cache = tmp_path / "cache"
        direct_train, _ = load_dvs128(mini_root, dt_us=100_000, n_timesteps=15)
        lazy_train, _ = load_dvs128(mini_root, dt_us=100_000, n_timesteps=15,
                                    cache_dir=cache)
        again_train, _ = load_dvs128(mini_root, dt_us=100_000, n_timesteps=15,
                                     cache_dir=cache)
        for (g0, l0), (g1, l1), (g2, l2) in zip(direct_train, lazy_train, again_train):
            assert l0 == l1 == l2
            assert g0.equals(g1) and g0.equals(g2)
