//! Argument parsing and the command implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gcnfabric::bench::{mix64, run_trial, trial_seed, TrialRecord};
use gcnfabric::gcn::{
    estimate_costs, select_order, storage_advantage, time_advantage, CostReport, ExecOrder, GcnModel, LayerSpec,
    Stage,
};
use gcnfabric::graphprep::{
    compress_block, diagonal_schedule, generate_start_vectors, partition_subgraph, BlockCoord, CooMatrix, StartVector,
    BLOCK_NODES, STAGES,
};
use gcnfabric::netsim::{
    aggregate_replay, bandwidth_report, compute_times, perf_multi_core, perf_single_core, simulate,
    simulate_instructions, Features, Packet, PerfInputs, SimStats,
};
use gcnfabric::router::{format_instruction_stream, generate_instructions, route};
use gcnfabric::CoreId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::workload::{
    feature_value, gen_synthetic, load_edge_list, pick_batch, random_weights, sample_neighbors, tiles, LoadOptions,
    SyntheticModel,
};

#[derive(Debug, Parser)]
#[command(name = "gcnfabric", version, about = "Hypercube GCN-training fabric simulator")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct GlobalArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub clock_hz: Option<f64>,
    #[arg(long, global = true)]
    pub mac_count: Option<u64>,
    /// 32-bit feature lanes per packet.
    #[arg(long, global = true)]
    pub lanes: Option<usize>,
    /// Per-hop fan-outs, input layer first (e.g. 25,10).
    #[arg(long, global = true, value_delimiter = ',')]
    pub fan_outs: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum SyntheticArg {
    UniformRandom,
    PowerLaw,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GraphArgs {
    /// Edge list with `src dst [weight]` lines.
    #[arg(long, conflicts_with = "synthetic")]
    pub edges: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub synthetic: Option<SyntheticArg>,
    #[arg(long, default_value_t = 1024)]
    pub nodes: u32,
    #[arg(long, default_value_t = 8192)]
    pub edge_count: usize,
    #[arg(long, default_value_t = 1.0)]
    pub exponent: f64,
    /// Mirror every edge.
    #[arg(long)]
    pub undirected: bool,
    /// The file stores one triangle of a symmetric matrix.
    #[arg(long)]
    pub triangular: bool,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Cut the graph into 1024-node tiles and 16x16 blocks.
    Partition {
        #[command(flatten)]
        graph: GraphArgs,
    },
    /// Compress every block into a Block Message.
    Compress {
        #[command(flatten)]
        graph: GraphArgs,
        /// List every nonempty message.
        #[arg(long)]
        detail: bool,
    },
    /// Route one start vector and emit its table and instruction streams.
    Route {
        /// Random Fuse-k stimulus instead of a graph episode.
        #[arg(long, conflicts_with_all = ["edges", "synthetic"])]
        fuse: Option<usize>,
        #[command(flatten)]
        graph: GraphArgs,
        /// Tile index into the graph's nonempty tiles.
        #[arg(long, default_value_t = 0)]
        tile: usize,
        #[arg(long, default_value_t = 0)]
        stage: usize,
        #[arg(long, default_value_t = 0)]
        round: usize,
        /// Write the routing table text here.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Write per-core hex instruction streams into this directory.
        #[arg(long)]
        instructions: Option<PathBuf>,
    },
    /// Aggregate random features over the graph through the fabric and check
    /// the result against a direct sparse product.
    Simulate {
        #[command(flatten)]
        graph: GraphArgs,
        /// Integer payloads (bit-exact check) instead of reals.
        #[arg(long)]
        integer: bool,
        /// Per-cycle link utilization CSV.
        #[arg(long)]
        utilization: Option<PathBuf>,
    },
    /// Completion cycles of random Fuse-k stimuli.
    BenchRouting {
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4])]
        fuse: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// CSV destination (stdout when absent).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// One forward, backward and SGD update over a sampled mini-batch.
    TrainStep {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 32)]
        features: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        /// auto, CoAg, AgCo, OursCoAg or OursAgCo.
        #[arg(long, default_value = "auto")]
        order: String,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long)]
        utilization: Option<PathBuf>,
    },
    /// Cost report for all four execution orders and the selection.
    EstimateOrder {
        #[arg(long)]
        b: u64,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        n_bar: u64,
        #[arg(long)]
        d: u64,
        #[arg(long)]
        h: u64,
        #[arg(long)]
        e: u64,
        #[arg(long)]
        c: u64,
    },
}

impl GlobalArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.clock_hz {
            cfg.clock_hz = v;
        }
        if let Some(v) = self.mac_count {
            cfg.mac_count = v;
        }
        if let Some(v) = self.lanes {
            cfg.lanes = v;
        }
        if let Some(v) = &self.fan_outs {
            cfg.fan_outs = v.clone();
        }
        if let Some(v) = self.hidden {
            cfg.hidden = v;
        }
        if let Some(v) = &self.output {
            cfg.output = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    hash: String,
    warnings: Vec<String>,
}

impl Ctx {
    fn report(&self, command: &str, mut body: Value) -> Value {
        let obj = body.as_object_mut().expect("reports are objects");
        obj.insert("command".into(), json!(command));
        obj.insert("seed".into(), json!(self.cfg.seed));
        obj.insert("config_hash".into(), json!(self.hash));
        if !self.warnings.is_empty() {
            obj.insert("warnings".into(), json!(self.warnings));
        }
        body
    }

    /// Appends `seed` and `config_hash` columns to every row.
    fn tag_csv(&self, csv: &str) -> String {
        let mut lines = csv.lines();
        let mut text = match lines.next() {
            Some(header) => format!("{header},seed,config_hash\n"),
            None => return String::new(),
        };
        for line in lines {
            text.push_str(&format!("{line},{},{}\n", self.cfg.seed, self.hash));
        }
        text
    }
}

fn emit(cfg: &ExperimentConfig, report: &Value, out: &mut dyn Write) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report)?;
    match &cfg.output {
        Some(path) => write_file(path, &(text + "\n")),
        None => {
            writeln!(out, "{text}")?;
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

fn load_graph(args: &GraphArgs, ctx: &mut Ctx) -> Result<CooMatrix, CliError> {
    let opts = LoadOptions {
        undirected: args.undirected,
        triangular: args.triangular,
    };
    match (&args.edges, args.synthetic) {
        (Some(path), _) => {
            let g = load_edge_list(path, &opts)?;
            if g.duplicates > 0 {
                ctx.warnings.push(format!("{} duplicate edges dropped (first kept)", g.duplicates));
            }
            Ok(g.matrix)
        }
        (None, Some(model)) => {
            let model = match model {
                SyntheticArg::UniformRandom => SyntheticModel::UniformRandom,
                SyntheticArg::PowerLaw => SyntheticModel::PowerLaw,
            };
            let g = gen_synthetic(model, args.nodes, args.edge_count, args.exponent, ctx.cfg.seed)?;
            Ok(if args.undirected || args.triangular { g.symmetrize() } else { g })
        }
        (None, None) => Err(CliError::Usage("one of --edges or --synthetic is required".into())),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = cli.global.resolve()?;
    let hash = cfg.hash(&cli.command);
    let mut ctx = Ctx {
        cfg,
        hash,
        warnings: Vec::new(),
    };
    match &cli.command {
        Command::Partition { graph } => partition(graph, &mut ctx, out),
        Command::Compress { graph, detail } => compress(graph, *detail, &mut ctx, out),
        Command::Route {
            fuse,
            graph,
            tile,
            stage,
            round,
            table,
            instructions,
        } => route_cmd(*fuse, graph, (*tile, *stage, *round), table.as_deref(), instructions.as_deref(), &mut ctx, out),
        Command::Simulate {
            graph,
            integer,
            utilization,
        } => simulate_cmd(graph, *integer, utilization.as_deref(), &mut ctx, out),
        Command::BenchRouting { fuse, trials, csv } => bench_routing(fuse, *trials, csv.as_deref(), &ctx, out),
        Command::TrainStep {
            graph,
            batch_size,
            features,
            classes,
            order,
            lr,
            utilization,
        } => train_step(
            graph,
            TrainParams {
                batch_size: *batch_size,
                features: *features,
                classes: *classes,
                order,
                lr: *lr,
            },
            utilization.as_deref(),
            &mut ctx,
            out,
        ),
        Command::EstimateOrder { b, n, n_bar, d, h, e, c } => {
            let spec = LayerSpec {
                b: *b,
                n: *n,
                n_bar: *n_bar,
                d: *d,
                h: *h,
                e: *e,
                c: *c,
            };
            estimate_order(&spec, &ctx, out)
        }
    }
}

fn block_counts(tile: &CooMatrix) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0usize; 16]; 16];
    for e in tile.entries() {
        counts[(e.row / BLOCK_NODES) as usize][(e.col / BLOCK_NODES) as usize] += 1;
    }
    counts
}

fn partition(args: &GraphArgs, ctx: &mut Ctx, out: &mut dyn Write) -> Result<(), CliError> {
    let g = load_graph(args, ctx)?;
    let mut reports = Vec::new();
    for t in tiles(&g) {
        let grid = partition_subgraph(&t.matrix)?;
        if grid.nnz() != t.matrix.nnz() {
            return Err(CliError::Invariant("partition lost entries".into()));
        }
        reports.push(json!({
            "row_tile": t.row_tile,
            "col_tile": t.col_tile,
            "nnz": t.matrix.nnz(),
            "block_nnz": block_counts(&t.matrix),
        }));
    }
    let report = ctx.report(
        "partition",
        json!({ "nodes": g.n_rows(), "nnz": g.nnz(), "tiles": reports }),
    );
    emit(&ctx.cfg, &report, out)
}

fn compress(args: &GraphArgs, detail: bool, ctx: &mut Ctx, out: &mut dyn Write) -> Result<(), CliError> {
    let g = load_graph(args, ctx)?;
    let schedule = diagonal_schedule();
    let mut reports = Vec::new();
    let (mut total_n, mut total_nnz) = (0usize, 0usize);
    for t in tiles(&g) {
        let grid = partition_subgraph(&t.matrix)?;
        let mut messages = Vec::new();
        let (mut sum_n, mut max_n, mut nonempty) = (0, 0, 0);
        for dest in CoreId::all() {
            for source in CoreId::all() {
                let msg = compress_block(grid.block(BlockCoord { dest, source }), dest, source);
                let n = msg.count();
                if n == 0 {
                    continue;
                }
                nonempty += 1;
                sum_n += n;
                max_n = max_n.max(n);
                if detail {
                    messages.push(json!({
                        "dest": dest,
                        "source": source,
                        "count": n,
                        "aggregate_nodes": msg.payload.keys().collect::<Vec<_>>(),
                    }));
                }
            }
        }
        let rounds: Vec<usize> = (0..STAGES)
            .map(|s| generate_start_vectors(&grid.stage_messages(&schedule, s)).map(|v| v.len()))
            .collect::<Result<_, _>>()?;
        total_n += sum_n;
        total_nnz += t.matrix.nnz();
        let mut r = json!({
            "row_tile": t.row_tile,
            "col_tile": t.col_tile,
            "nnz": t.matrix.nnz(),
            "messages": nonempty,
            "sum_n": sum_n,
            "max_n": max_n,
            "rounds_per_stage": rounds,
        });
        if detail {
            r["detail"] = json!(messages);
        }
        reports.push(r);
    }
    let ratio = if total_n == 0 { 0.0 } else { total_nnz as f64 / total_n as f64 };
    let report = ctx.report(
        "compress",
        json!({ "nnz": total_nnz, "sum_n": total_n, "entries_per_message": ratio, "tiles": reports }),
    );
    emit(&ctx.cfg, &report, out)
}

fn route_cmd(
    fuse: Option<usize>,
    args: &GraphArgs,
    (tile, stage, round): (usize, usize, usize),
    table_path: Option<&Path>,
    instr_dir: Option<&Path>,
    ctx: &mut Ctx,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let seed = ctx.cfg.seed;
    let (start, origin): (StartVector, Value) = match fuse {
        Some(k) => (
            gcnfabric::bench::fuse_stimulus(k, seed)?,
            json!({ "fuse": k }),
        ),
        None => {
            let g = load_graph(args, ctx)?;
            let ts = tiles(&g);
            let t = ts
                .get(tile)
                .ok_or_else(|| CliError::Usage(format!("tile {tile} out of range ({} nonempty tiles)", ts.len())))?;
            if stage >= STAGES {
                return Err(CliError::Usage(format!("stage {stage} outside 0..{STAGES}")));
            }
            let grid = partition_subgraph(&t.matrix)?;
            let vectors = generate_start_vectors(&grid.stage_messages(&diagonal_schedule(), stage))?;
            let sv = vectors
                .get(round)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("round {round} out of range ({} rounds)", vectors.len())))?;
            (sv, json!({ "row_tile": t.row_tile, "col_tile": t.col_tile, "stage": stage, "round": round }))
        }
    };
    let table = route(&start, mix64(seed))?;
    table.validate()?;
    let packets: BTreeMap<usize, Packet<i64>> = start
        .active_slots()
        .map(|(slot, s)| (slot, Packet { features: vec![slot as i64], aggregate_node: s.aggregate_node }))
        .collect();
    let direct = simulate(&table, &packets)?;
    let streams = generate_instructions(&table);
    let replay = simulate_instructions(&streams, &table.sources, &table.destinations, &packets)?;
    if replay.log != direct.log {
        return Err(CliError::Invariant("instruction replay diverges from the routing table".into()));
    }
    if let Some(p) = table_path {
        write_file(p, &table.to_text())?;
    }
    if let Some(dir) = instr_dir {
        fs::create_dir_all(dir)?;
        for (core, stream) in &streams {
            write_file(&dir.join(format!("core_{:02}.hex", core.value())), &format_instruction_stream(stream)?)?;
        }
    }
    let report = ctx.report(
        "route",
        json!({
            "origin": origin,
            "active": start.active(),
            "cycles": table.cycles(),
            "peak_virtual_occupancy": table.peak_virtual_occupancy(),
            "hops": direct.stats.hops,
            "instructions_per_core": streams.values().map(Vec::len).collect::<Vec<_>>(),
            "instruction_replay": "identical",
            "table": table.to_text().lines().collect::<Vec<_>>(),
        }),
    );
    emit(&ctx.cfg, &report, out)
}

fn stats_summary(stats: &SimStats, clock_hz: f64) -> Value {
    let bw = bandwidth_report(stats, 1.0 / clock_hz, 1);
    json!({
        "cycles": stats.cycles,
        "messages_delivered": stats.messages_delivered,
        "hops": stats.hops,
        "bytes_moved": stats.bytes_moved,
        "payload_bytes_moved": stats.payload_bytes_moved,
        "mean_link_utilization": stats.mean_link_utilization(),
        "peak_virtual_occupancy": stats.peak_virtual_occupancy,
        "raw_bandwidth_bytes_per_s": bw.raw_bytes_per_s,
    })
}

fn simulate_cmd(
    args: &GraphArgs,
    integer: bool,
    util_path: Option<&Path>,
    ctx: &mut Ctx,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let g = load_graph(args, ctx)?;
    let (seed, lanes) = (ctx.cfg.seed, ctx.cfg.lanes);
    if integer && g.entries().iter().any(|e| e.weight.fract() != 0.0) {
        return Err(CliError::Usage("--integer needs integer edge weights".into()));
    }
    let (stats, episodes, check, max_rel_err);
    if integer {
        let value = |node: usize, l: usize| (feature_value(seed, node as u32, l) * 1000.0).round() as i64;
        let (got, s, e) = replay_all(&g, lanes, seed, value)?;
        (stats, episodes) = (s, e);
        let mut oracle = vec![0i64; g.n_rows() as usize * lanes];
        for en in g.entries() {
            for l in 0..lanes {
                oracle[en.row as usize * lanes + l] += en.weight.round() as i64 * value(en.col as usize, l);
            }
        }
        (check, max_rel_err) = (got == oracle, 0.0);
    } else {
        let value = |node: usize, l: usize| feature_value(seed, node as u32, l);
        let (got, s, e) = replay_all(&g, lanes, seed, value)?;
        (stats, episodes) = (s, e);
        let mut oracle = vec![0f64; g.n_rows() as usize * lanes];
        for en in g.entries() {
            for l in 0..lanes {
                oracle[en.row as usize * lanes + l] += en.weight * value(en.col as usize, l);
            }
        }
        let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let diff = oracle.iter().zip(&got).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        (check, max_rel_err) = (diff / scale <= 1e-5, diff / scale);
    }
    if !check {
        return Err(CliError::Invariant(format!(
            "fabric aggregation disagrees with the direct product (max rel err {max_rel_err:e})"
        )));
    }
    if let Some(p) = util_path {
        write_file(p, &ctx.tag_csv(&stats.utilization_csv()))?;
    }
    let report = ctx.report(
        "simulate",
        json!({
            "nodes": g.n_rows(),
            "nnz": g.nnz(),
            "lanes": lanes,
            "payload": if integer { "integer" } else { "real" },
            "episodes": episodes,
            "oracle_check": "pass",
            "max_relative_error": max_rel_err,
            "stats": stats_summary(&stats, ctx.cfg.clock_hz),
        }),
    );
    emit(&ctx.cfg, &report, out)
}

/// Routes every tile of `g` and accumulates into global rows.
fn replay_all<T: gcnfabric::netsim::Lane>(
    g: &CooMatrix,
    lanes: usize,
    seed: u64,
    value: impl Fn(usize, usize) -> T,
) -> Result<(Vec<T>, SimStats, usize), CliError> {
    let mut output = vec![T::default(); g.n_rows() as usize * lanes];
    let mut stats = SimStats::default();
    let mut episodes = 0;
    for (k, t) in tiles(g).into_iter().enumerate() {
        let col0 = (t.col_tile * 1024) as usize;
        let feats = Features::from_fn(1024, lanes, |r, l| {
            if col0 + r < g.n_cols() as usize {
                value(col0 + r, l)
            } else {
                T::default()
            }
        });
        let report = aggregate_replay(&t.matrix, &feats, mix64(seed ^ k as u64))?;
        let row0 = (t.row_tile * 1024) as usize;
        for r in 0..1024usize {
            if row0 + r >= g.n_rows() as usize {
                break;
            }
            for (o, &x) in output[(row0 + r) * lanes..(row0 + r + 1) * lanes].iter_mut().zip(report.output.row(r)) {
                *o += x;
            }
        }
        episodes += report.episodes;
        stats.absorb(&report.stats);
    }
    Ok((output, stats, episodes))
}

fn bench_routing(
    fuses: &[usize],
    trials: usize,
    csv: Option<&Path>,
    ctx: &Ctx,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let seed = ctx.cfg.seed;
    let mut text = String::from("record,fuse,trial,cycles,active,trial_seed,seed,config_hash\n");
    let mut means = Vec::new();
    for &fuse in fuses {
        let records: Vec<TrialRecord> = (0..trials)
            .into_par_iter()
            .map(|t| run_trial(fuse, seed, t).map(|(_, _, rec)| rec))
            .collect::<Result<_, _>>()?;
        for r in &records {
            debug_assert_eq!(r.seed, trial_seed(seed, fuse, r.trial));
            text.push_str(&format!(
                "trial,{},{},{},{},{},{seed},{}\n",
                r.fuse, r.trial, r.cycles, r.active, r.seed, ctx.hash
            ));
        }
        let mean = records.iter().map(|r| r.cycles as f64).sum::<f64>() / records.len().max(1) as f64;
        means.push((fuse, mean, records.len()));
    }
    for (fuse, mean, n) in &means {
        text.push_str(&format!("mean,{fuse},{n},{mean:.6},,,{seed},{}\n", ctx.hash));
    }
    match csv {
        Some(p) => write_file(p, &text),
        None => {
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

struct TrainParams<'a> {
    batch_size: usize,
    features: usize,
    classes: usize,
    order: &'a str,
    lr: f64,
}

fn report_costs(r: &CostReport) -> Value {
    let stages: BTreeMap<String, Value> = Stage::ALL
        .iter()
        .map(|&s| (format!("{s:?}"), json!({ "time": r.time_of(s), "storage": r.storage_of(s) })))
        .collect();
    json!({ "stages": stages, "total_time": r.total_time(), "total_storage": r.total_storage() })
}

/// Per-layer orders: either one fixed order, or the estimator's pick per
/// layer. A transposed chain must start at the top layer, so an auto-selected
/// transposed order below a standard layer falls back to its base order.
fn choose_orders(specs: &[LayerSpec], requested: &str) -> Result<Vec<ExecOrder>, CliError> {
    if requested.eq_ignore_ascii_case("auto") {
        let mut orders: Vec<ExecOrder> = specs.iter().map(select_order).collect();
        let mut standard_above = false;
        for o in orders.iter_mut().rev() {
            if standard_above && o.is_transposed() {
                *o = o.base();
            }
            standard_above |= !o.is_transposed();
        }
        Ok(orders)
    } else {
        let o: ExecOrder = requested.parse().map_err(CliError::Usage)?;
        Ok(vec![o; specs.len()])
    }
}

fn train_step(
    args: &GraphArgs,
    p: TrainParams<'_>,
    util_path: Option<&Path>,
    ctx: &mut Ctx,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let g = load_graph(args, ctx)?;
    let cfg = ctx.cfg.clone();
    let batch_ids = pick_batch(g.n_rows(), p.batch_size, cfg.seed)?;
    let workload = sample_neighbors(&g, &batch_ids, &cfg.fan_outs, p.features, p.classes, cfg.seed)?;
    let specs = workload.layer_specs(cfg.hidden);
    let orders = choose_orders(&specs, p.order)?;
    let batch = workload.to_sampled()?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ 0x3E1));
    let weights = specs
        .iter()
        .map(|s| random_weights(s.d as usize, s.h as usize, &mut rng))
        .collect();
    let mut model = GcnModel::new(weights);
    let step = model.train_step(&batch, &orders, p.lr)?;
    let measured = step.trace.report();
    let loss_after = model.loss(&batch)?;

    let perf = PerfInputs {
        mac_count: cfg.mac_count,
        clock_hz: cfg.clock_hz,
        ..Default::default()
    };
    let mut layers = Vec::new();
    let mut utilization = SimStats::default();
    let mut t_total = 0u64;
    for (l, (spec, &order)) in specs.iter().zip(&orders).enumerate() {
        let adj = &batch.adjacency[l];
        // message passing: every aggregation packet carries `lanes` values of the aggregated width
        let width = if order.combine_first() { spec.h } else { spec.d } as usize;
        let passes = width.div_ceil(cfg.lanes) as u64;
        let (_, routed, _) = replay_all(adj, 1, cfg.seed ^ l as u64, |_, _| 0i64)?;
        let t_msg = routed.cycles as u64 * passes;
        utilization.absorb(&routed);

        let per_core: Vec<(u64, u64)> = core_shares(adj, order)
            .into_iter()
            .map(|(rows, e)| {
                let mut share = *spec;
                if order.combine_first() {
                    share.n_bar = rows;
                } else {
                    share.n = rows;
                }
                share.e = e;
                compute_times(&share, order, &perf)
            })
            .collect();
        let singles: Vec<u64> = per_core
            .iter()
            .map(|&(c, a)| perf_single_core(&PerfInputs { t_msg, t_comb: c, t_agg: a, ..perf }))
            .collect();
        let t_multi = perf_multi_core(&singles)?;
        t_total += t_multi;
        let compute_max = per_core.iter().map(|&(c, a)| c + a).max().unwrap_or(0);
        layers.push(json!({
            "layer": l,
            "spec": spec,
            "order": order.to_string(),
            "estimated": report_costs(&estimate_costs(spec, order)),
            "t_msg": t_msg,
            "t_comb_max": per_core.iter().map(|p| p.0).max().unwrap_or(0),
            "t_agg_max": per_core.iter().map(|p| p.1).max().unwrap_or(0),
            "t_single_per_core": singles,
            "t_multi": t_multi,
            "ctc_ratio": if t_msg == 0 { Value::Null } else { json!(compute_max as f64 / t_msg as f64) },
        }));
    }
    if let Some(path) = util_path {
        write_file(path, &ctx.tag_csv(&utilization.utilization_csv()))?;
    }
    let report = ctx.report(
        "train-step",
        json!({
            "batch_size": workload.batch_size(),
            "node_sets": workload.node_sets.iter().map(Vec::len).collect::<Vec<_>>(),
            "orders": orders.iter().map(ToString::to_string).collect::<Vec<_>>(),
            "loss_before": step.loss,
            "loss_after": loss_after,
            "measured_forward_backward": report_costs(&measured),
            "layers": layers,
            "t_multi_total": t_total,
            "seconds_at_clock": t_total as f64 / cfg.clock_hz,
            "mean_link_utilization": utilization.mean_link_utilization(),
            "utilization_cycles": utilization.link_utilization.len(),
        }),
    );
    emit(&ctx.cfg, &report, out)
}

/// `(rows, nonzeros)` owned by each core: row `r` lives on core `(r / 64) % 16`.
/// Rows are counted over the side the combination runs on.
fn core_shares(adj: &CooMatrix, order: ExecOrder) -> Vec<(u64, u64)> {
    let owner = |r: u32| ((r / BLOCK_NODES) % 16) as usize;
    let mut shares = vec![(0u64, 0u64); 16];
    let rows = if order.combine_first() { adj.n_cols() } else { adj.n_rows() };
    for r in 0..rows {
        shares[owner(r)].0 += 1;
    }
    for e in adj.entries() {
        shares[owner(e.row)].1 += 1;
    }
    shares
}

fn estimate_order(spec: &LayerSpec, ctx: &Ctx, out: &mut dyn Write) -> Result<(), CliError> {
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let costs: BTreeMap<String, Value> = ExecOrder::ALL
        .iter()
        .map(|&o| (o.to_string(), report_costs(&estimate_costs(spec, o))))
        .collect();
    let selected = select_order(spec);
    let report = ctx.report(
        "estimate-order",
        json!({
            "spec": spec,
            "costs": costs,
            "selected": selected.to_string(),
            "time_advantage": {
                "CoAg": time_advantage(spec, ExecOrder::CoAg).to_string(),
                "AgCo": time_advantage(spec, ExecOrder::AgCo).to_string(),
            },
            "storage_advantage": {
                "CoAg": storage_advantage(spec, ExecOrder::CoAg).to_string(),
                "AgCo": storage_advantage(spec, ExecOrder::AgCo).to_string(),
            },
        }),
    );
    emit(&ctx.cfg, &report, out)
}
