use std::collections::BTreeMap;

use gcnfabric::bench::{fuse_stimulus, run_trial};
use gcnfabric::graphprep::{CooEntry, CooMatrix, StartVector};
use gcnfabric::netsim::{
    aggregate_replay, simulate, simulate_instructions, DeliveryLog, Features, Packet, SimError,
};
use gcnfabric::router::{
    format_instruction_stream, generate_instructions, parse_instruction_stream, route, InstructionStreams,
};
use gcnfabric::CoreId;

fn packets(start: &StartVector) -> BTreeMap<usize, Packet<i64>> {
    start
        .active_slots()
        .map(|(slot, s)| {
            (
                slot,
                Packet {
                    features: vec![slot as i64; 16],
                    aggregate_node: s.aggregate_node,
                },
            )
        })
        .collect()
}

fn endpoints(start: &StartVector) -> (Vec<Option<CoreId>>, Vec<Option<CoreId>>) {
    (
        start.slots.iter().map(|s| s.map(|s| s.source)).collect(),
        start.slots.iter().map(|s| s.map(|s| s.dest)).collect(),
    )
}

#[test]
fn instruction_replay_matches_table_replay() {
    for fuse in 1..=4 {
        for trial in 0..50 {
            let (start, table, _) = run_trial(fuse, 11, trial).unwrap();
            let pk = packets(&start);
            let direct = simulate(&table, &pk).unwrap();
            let streams = generate_instructions(&table);
            let (src, dst) = endpoints(&start);
            let replayed = simulate_instructions(&streams, &src, &dst, &pk).unwrap();
            assert_eq!(direct.log, replayed.log, "fuse {fuse} trial {trial}");
            assert_eq!(direct.stats, replayed.stats);
            assert_eq!(direct.aggregates, replayed.aggregates);
        }
    }
}

#[test]
fn instruction_streams_survive_hex_text() {
    let (start, table, _) = run_trial(4, 3, 0).unwrap();
    let streams = generate_instructions(&table);
    let reparsed: InstructionStreams = streams
        .iter()
        .map(|(c, s)| (*c, parse_instruction_stream(&format_instruction_stream(s).unwrap()).unwrap()))
        .collect();
    assert_eq!(streams, reparsed);
    let (src, dst) = endpoints(&start);
    let pk = packets(&start);
    assert_eq!(
        simulate_instructions(&reparsed, &src, &dst, &pk).unwrap().log,
        simulate(&table, &pk).unwrap().log
    );
}

#[test]
fn tampered_stream_is_rejected() {
    let start = fuse_stimulus(2, 5).unwrap();
    let table = route(&start, 1).unwrap();
    let mut streams = generate_instructions(&table);
    let (src, dst) = endpoints(&start);
    // retarget the first real instruction of some core
    let core = CoreId::new(3).unwrap();
    let ins = &mut streams.get_mut(&core).unwrap()[1];
    ins.destination_id = ins.destination_id.flip(0);
    let err = simulate_instructions(&streams, &src, &dst, &packets(&start)).unwrap_err();
    assert!(matches!(err, SimError::ReplayMismatch { .. }), "{err}");
}

#[test]
fn truncated_stream_is_rejected() {
    let start = fuse_stimulus(1, 8).unwrap();
    let table = route(&start, 2).unwrap();
    let mut streams = generate_instructions(&table);
    let (src, dst) = endpoints(&start);
    streams.get_mut(&CoreId::new(0).unwrap()).unwrap().truncate(1);
    assert!(simulate_instructions(&streams, &src, &dst, &packets(&start)).is_err());
}

#[test]
fn delivery_log_json_round_trip() {
    let (start, table, _) = run_trial(3, 9, 1).unwrap();
    let out = simulate(&table, &packets(&start)).unwrap();
    let json = out.log.to_json().unwrap();
    let back: DeliveryLog = serde_json::from_str(&json).unwrap();
    assert_eq!(back, out.log);
    assert_eq!(out.log.delivered_slots().len(), 48);
    assert_eq!(out.stats.link_utilization.len(), table.cycles());
    assert!(out.stats.link_utilization.iter().all(|&u| u > 0.0 && u <= 1.0));
}

#[test]
fn small_graph_aggregation_is_exact() {
    // ring over 1024 nodes plus a few long chords
    let mut entries: Vec<CooEntry> = (0..1024).map(|i| CooEntry::new(i, (i + 1) % 1024, 2.0)).collect();
    entries.extend([CooEntry::new(5, 900, 3.0), CooEntry::new(700, 5, -1.0), CooEntry::new(64, 64, 1.0)]);
    let g = CooMatrix::new(1024, 1024, entries.clone()).unwrap();
    let x = Features::from_fn(1024, 4, |r, l| (r * 4 + l) as i64);
    let report = aggregate_replay(&g, &x, 1).unwrap();
    let mut oracle = Features::<i64>::zeros(1024, 4);
    for e in &entries {
        for l in 0..4 {
            oracle.row_mut(e.row as usize)[l] += e.weight as i64 * x.row(e.col as usize)[l];
        }
    }
    assert_eq!(report.output, oracle);
    assert_eq!(report.episode_cycles.len(), report.episodes);
    assert!(report.stats.messages_delivered > 0);
}

#[test]
fn empty_graph_aggregates_to_zero() {
    let g = CooMatrix::empty(1024, 1024);
    let x = Features::from_fn(1024, 2, |r, _| r as f64);
    let report = aggregate_replay(&g, &x, 0).unwrap();
    assert!(report.output.data.iter().all(|&v| v == 0.0));
    assert_eq!(report.episodes, 0);
}

#[test]
fn single_precision_aggregation_tracks_double() {
    let entries: Vec<CooEntry> = (0..2000u32)
        .map(|k| CooEntry::new((k * 37) % 1024, (k * 101 + 7) % 1024, 0.25 + (k % 7) as f64 * 0.1))
        .collect();
    let mut seen = std::collections::HashSet::new();
    let entries: Vec<CooEntry> = entries.into_iter().filter(|e| seen.insert((e.row, e.col))).collect();
    let g = CooMatrix::new(1024, 1024, entries).unwrap();
    let x64 = Features::from_fn(1024, 16, |r, l| ((r * 7 + l * 3) % 19) as f64 / 19.0);
    let x32 = Features::from_fn(1024, 16, |r, l| x64.row(r)[l] as f32);
    let a = aggregate_replay(&g, &x64, 4).unwrap().output;
    let b = aggregate_replay(&g, &x32, 4).unwrap().output;
    let worst = a.data.iter().zip(&b.data).map(|(p, q)| (p - *q as f64).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");
}
