use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use pingpong::client::{befriend, parse_friends, Client, FriendLine};
use pingpong::crypto::{read_key_file, write_key_file, ServiceKeyPair, ServicePublicKey};
use pingpong::harness::{
    latency_histogram_csv, run_cluster_sim, simulate_dial, simulate_notify, ClusterConfig, MsgTrace, SYNTHETIC_TRACE,
};
use pingpong::net::{
    spawn_backend, spawn_ping_server, spawn_pong_server, BackendConfig, BackendKind, FrontRole, NetClient,
    NetClientConfig, PingServerConfig, PongServerConfig, ServerHandle,
};
use pingpong::obliv::{NoTrace, OpCounter};
use pingpong::pong::Oht;
use pingpong::protocol::{ClientId, Config};
use pingpong::sim::sim_obl_aggregation;

#[derive(Parser)]
#[command(name = "pingpong", version, about = "Metadata-private messaging: servers, client, simulations")]
struct Cli {
    /// INI file; PINGPONG_* environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Notification service: single node, entry, or backend.
    PingServer(PingArgs),
    /// Message store: single node, entry, or storage backend.
    PongServer(PongArgs),
    /// Connects, runs rounds, and writes delivered messages as JSON lines.
    Client(ClientArgs),
    /// Trace replays and in-process deployments.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Cost of table builds and aggregation as input size grows.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Service key pairs, example friend files and a config.
    Keygen(KeygenArgs),
}

#[derive(Args)]
struct ServerCommon {
    #[arg(long)]
    listen: Option<String>,
    /// Comma-separated backend addresses (entry role).
    #[arg(long, value_delimiter = ',')]
    peers: Vec<String>,
    /// Position of this entry among all entries.
    #[arg(long, default_value_t = 0)]
    entry_index: usize,
    /// Number of entries feeding a backend.
    #[arg(long)]
    entries: Option<usize>,
    #[arg(long)]
    secret_key: Option<PathBuf>,
    /// Stop after this many rounds.
    #[arg(long)]
    rounds: Option<u64>,
    /// Address for the plain-text counters.
    #[arg(long)]
    metrics: Option<String>,
}

#[derive(Args)]
struct PingArgs {
    #[command(flatten)]
    common: ServerCommon,
    #[arg(long)]
    round_ms: Option<u64>,
    #[arg(long, conflicts_with = "backend")]
    entry: bool,
    #[arg(long)]
    backend: bool,
}

#[derive(Args)]
struct PongArgs {
    #[command(flatten)]
    common: ServerCommon,
    #[arg(long)]
    round_ms: Option<u64>,
    #[arg(long, conflicts_with = "storage")]
    entry: bool,
    #[arg(long)]
    storage: bool,
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long)]
    id: u64,
    #[arg(long)]
    server_ping: Option<String>,
    #[arg(long)]
    server_pong: Option<String>,
    /// Lines of `id hex_sk hex_sealed_token idx`.
    #[arg(long)]
    friends_file: Option<PathBuf>,
    /// Delivered messages are appended here as JSON lines (default stdout).
    #[arg(long)]
    inbox_out: Option<PathBuf>,
    #[arg(long)]
    ping_pub: Option<PathBuf>,
    #[arg(long)]
    pong_pub: Option<PathBuf>,
    /// Seed of the client's label; must match the one its friends' tokens were made with.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 10)]
    rounds: u64,
    /// Queue a message, as `TO:TEXT`. Repeatable.
    #[arg(long)]
    send: Vec<String>,
    #[arg(long, default_value_t = 30)]
    timeout_s: u64,
}

#[derive(Subcommand)]
enum SimCmd {
    /// Dialing framework replay.
    Dial {
        /// Trace file (`sender receiver unix_ts` lines), or `sample`.
        #[arg(long)]
        trace: String,
        #[arg(long, default_value_t = 300.0)]
        window: f64,
        #[arg(long, default_value_t = 0.0)]
        dial_latency: f64,
        #[arg(long, default_value_t = 0.5)]
        conv_latency: f64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Notification framework replay.
    Notify {
        #[arg(long)]
        trace: String,
        #[arg(long, default_value_t = 3.0)]
        proc_latency: f64,
        #[arg(long)]
        round_s: Option<f64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// In-process deployment with delivery and uniformity checks.
    Cluster {
        #[arg(long, default_value_t = 200)]
        clients: usize,
        #[arg(long, default_value_t = 50)]
        rounds: usize,
        #[arg(long, default_value_t = 1)]
        backends: usize,
        #[arg(long, default_value_t = 1)]
        entries: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        friends: usize,
        #[arg(long, default_value_t = 0.3)]
        send_prob: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct OutArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Latency histogram CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    bins: usize,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Table build and lookup cost per size.
    Oht {
        #[arg(long, value_delimiter = ',', default_value = "1e5,1e6")]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        lookups: usize,
        /// Fail unless build time grows superlinearly and lookups stay flat.
        #[arg(long)]
        check: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Notification aggregation cost per batch size.
    Aggregation {
        #[arg(long, value_delimiter = ',', default_value = "1e5,1e6")]
        sizes: Vec<String>,
        #[arg(long)]
        check: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Example clients, befriended in a ring.
    #[arg(long, default_value_t = 2)]
    clients: usize,
    #[arg(long)]
    seed: Option<u64>,
}

enum Fail {
    /// Bad flags, config, or input files.
    Usage(String),
    /// A run that completed but did not meet its checks, or a runtime fault.
    Check(String),
}

type Res = Result<(), Fail>;

fn usage<E: std::fmt::Display>(e: E) -> Fail {
    Fail::Usage(e.to_string())
}

fn failed<E: std::fmt::Display>(e: E) -> Fail {
    Fail::Check(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = Config::load(cli.config.as_deref())
        .map_err(usage)
        .and_then(|cfg| run(cli.cmd, cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Check(m)) => {
            eprintln!("failed: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd, cfg: Config) -> Res {
    match cmd {
        Cmd::PingServer(a) => ping_server(a, cfg),
        Cmd::PongServer(a) => pong_server(a, cfg),
        Cmd::Client(a) => client(a, cfg),
        Cmd::Sim(s) => sim(s, cfg),
        Cmd::Bench(b) => bench(b),
        Cmd::Keygen(k) => keygen(k),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Res {
    match out {
        Some(p) => fs::write(p, format!("{text}\n")).map_err(|e| usage(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_keys(path: Option<&PathBuf>, what: &str) -> Result<ServiceKeyPair, Fail> {
    let p = path.ok_or_else(|| usage(format!("{what} needs --secret-key or a secret_key in the config")))?;
    Ok(ServiceKeyPair::from_secret_bytes(read_key_file(p).map_err(usage)?))
}

fn load_pub(path: Option<&PathBuf>, what: &str) -> Result<ServicePublicKey, Fail> {
    let p = path.ok_or_else(|| usage(format!("missing {what} public key file")))?;
    Ok(ServicePublicKey(read_key_file(p).map_err(usage)?))
}

fn wait(h: ServerHandle) -> Res {
    while !h.is_stopped() {
        thread::sleep(Duration::from_millis(50));
    }
    h.join();
    Ok(())
}

fn listen_addr(flag: &Option<String>, cfg: &Option<String>) -> Result<String, Fail> {
    flag.clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| usage("no listen address (--listen or config)"))
}

fn ping_server(a: PingArgs, mut cfg: Config) -> Res {
    if let Some(ms) = a.round_ms {
        cfg.params.set("round_ms", &ms.to_string()).map_err(usage)?;
    }
    let c = &a.common;
    let listen = listen_addr(&c.listen, &cfg.ping.listen)?;
    let keys = load_keys(c.secret_key.as_ref().or(cfg.ping.secret_key.as_ref()), "ping-server")?;
    let peers = if c.peers.is_empty() { cfg.ping.peers.clone() } else { c.peers.clone() };
    let handle = if a.backend {
        spawn_backend(BackendConfig {
            listen,
            internal_key: keys.internal_key(),
            entries: c.entries.unwrap_or(cfg.entries),
            kind: BackendKind::Ping,
            metrics: c.metrics.clone(),
            seed: None,
        })
    } else {
        let mut sc = PingServerConfig::new(&listen, keys);
        sc.round_ms = cfg.params.round_ms;
        sc.lambda = cfg.params.lambda;
        sc.max_rounds = c.rounds;
        sc.metrics = c.metrics.clone();
        if a.entry {
            if peers.is_empty() {
                return Err(usage("--entry needs backend --peers"));
            }
            sc.role = FrontRole::Entry {
                index: c.entry_index,
                backends: peers,
            };
        }
        spawn_ping_server(sc)
    }
    .map_err(failed)?;
    eprintln!("ping-server on {}", handle.addr());
    wait(handle)
}

fn pong_server(a: PongArgs, mut cfg: Config) -> Res {
    if let Some(ms) = a.round_ms {
        cfg.params.set("round_ms", &ms.to_string()).map_err(usage)?;
    }
    let c = &a.common;
    let listen = listen_addr(&c.listen, &cfg.pong.listen)?;
    let keys = load_keys(c.secret_key.as_ref().or(cfg.pong.secret_key.as_ref()), "pong-server")?;
    let peers = if c.peers.is_empty() { cfg.pong.peers.clone() } else { c.peers.clone() };
    let handle = if a.storage {
        spawn_backend(BackendConfig {
            listen,
            internal_key: keys.internal_key(),
            entries: c.entries.unwrap_or(cfg.entries),
            kind: BackendKind::Pong(cfg.params.clone()),
            metrics: c.metrics.clone(),
            seed: None,
        })
    } else {
        let mut sc = PongServerConfig::new(&listen, keys, cfg.params.clone());
        sc.max_rounds = c.rounds;
        sc.metrics = c.metrics.clone();
        if a.entry {
            if peers.is_empty() {
                return Err(usage("--entry needs storage --peers"));
            }
            sc.role = FrontRole::Entry {
                index: c.entry_index,
                backends: peers,
            };
        }
        spawn_pong_server(sc)
    }
    .map_err(failed)?;
    eprintln!("pong-server on {}", handle.addr());
    wait(handle)
}

fn client(a: ClientArgs, cfg: Config) -> Res {
    let ping_pk = load_pub(a.ping_pub.as_ref().or(cfg.ping.public_key.as_ref()), "ping")?;
    let pong_pk = load_pub(a.pong_pub.as_ref().or(cfg.pong.public_key.as_ref()), "pong")?;
    let id = ClientId(a.id);
    let mut c = Client::new(id, ping_pk, &cfg.params, a.seed.unwrap_or(a.id));
    if let Some(p) = &a.friends_file {
        let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        c.load_friends(&parse_friends(&text).map_err(usage)?).map_err(usage)?;
    }
    for s in &a.send {
        let (to, text) = s.split_once(':').ok_or_else(|| usage(format!("--send {s:?}: expected TO:TEXT")))?;
        let to: u64 = to.parse().map_err(|_| usage(format!("--send {s:?}: bad recipient")))?;
        c.send(ClientId(to), text.as_bytes()).map_err(usage)?;
    }
    let net = NetClientConfig {
        ping_addr: a
            .server_ping
            .or(cfg.ping.listen)
            .ok_or_else(|| usage("no Ping address (--server-ping or config)"))?,
        ping_pk,
        pong_addr: a
            .server_pong
            .or(cfg.pong.listen)
            .ok_or_else(|| usage("no Pong address (--server-pong or config)"))?,
        pong_pk,
        timeout: Duration::from_secs(a.timeout_s),
    };
    let mut sink: Box<dyn Write> = match &a.inbox_out {
        Some(p) => Box::new(
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?,
        ),
        None => Box::new(std::io::stdout()),
    };
    let mut nc = NetClient::connect(c, &net).map_err(failed)?;
    let mut write_err = None;
    nc.run(a.rounds, |d| {
        let line = serde_json::to_string(d).expect("plain struct");
        if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
            write_err.get_or_insert(e);
        }
    })
    .map_err(failed)?;
    if let Some(e) = write_err {
        return Err(failed(format!("inbox output: {e}")));
    }
    let pending = nc.client().outbox_len();
    if pending > 0 {
        log::warn!("{pending} messages still queued after {} rounds", a.rounds);
    }
    Ok(())
}

fn load_trace(spec: &str) -> Result<MsgTrace, Fail> {
    if spec == "sample" {
        MsgTrace::parse(SYNTHETIC_TRACE).map_err(failed)
    } else {
        MsgTrace::load(Path::new(spec)).map_err(usage)
    }
}

fn write_csv(o: &OutArgs, lat: &[f64]) -> Res {
    if let Some(p) = &o.csv {
        fs::write(p, latency_histogram_csv(lat, o.bins)).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn sim(s: SimCmd, cfg: Config) -> Res {
    match s {
        SimCmd::Dial {
            trace,
            window,
            dial_latency,
            conv_latency,
            out,
        } => {
            if window <= 0.0 {
                return Err(usage("--window must be positive"));
            }
            let r = simulate_dial(&load_trace(&trace)?, window, dial_latency, conv_latency);
            write_csv(&out, &r.latencies)?;
            emit(out.out.as_deref(), &serde_json::to_string_pretty(&r).map_err(failed)?)
        }
        SimCmd::Notify {
            trace,
            proc_latency,
            round_s,
            out,
        } => {
            let round = round_s.unwrap_or(cfg.params.round_ms as f64 / 1000.0);
            if round <= 0.0 {
                return Err(usage("round length must be positive"));
            }
            let r = simulate_notify(&load_trace(&trace)?, proc_latency, round);
            write_csv(&out, &r.latencies)?;
            emit(out.out.as_deref(), &serde_json::to_string_pretty(&r).map_err(failed)?)
        }
        SimCmd::Cluster {
            clients,
            rounds,
            backends,
            entries,
            seed,
            friends,
            send_prob,
            out,
        } => {
            let cc = ClusterConfig {
                clients,
                rounds,
                backends,
                entries,
                seed,
                friends_per_client: friends,
                send_prob,
                params: cfg.params,
                ..ClusterConfig::default()
            };
            let start = Instant::now();
            let report = run_cluster_sim(&cc).map_err(usage)?;
            let mut v = serde_json::to_value(&report).map_err(failed)?;
            v["ok"] = json!(report.ok());
            v["wall_s"] = json!(start.elapsed().as_secs_f64());
            emit(out.as_deref(), &serde_json::to_string_pretty(&v).map_err(failed)?)?;
            if report.ok() {
                Ok(())
            } else {
                Err(failed("delivery or uniformity check failed"))
            }
        }
    }
}

fn parse_sizes(sizes: &[String]) -> Result<Vec<usize>, Fail> {
    sizes
        .iter()
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 1.0)
                .map(|v| v as usize)
                .ok_or_else(|| usage(format!("bad size {s:?}")))
        })
        .collect()
}

fn bench(b: BenchCmd) -> Res {
    let cfg = pingpong::protocol::Params::default();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    match b {
        BenchCmd::Oht {
            sizes,
            lookups,
            check,
            out,
        } => {
            let sizes = parse_sizes(&sizes)?;
            let mut rows = Vec::new();
            for n in sizes {
                let entries: Vec<(u64, u64)> = (0..n).map(|i| (rng.gen(), i as u64)).collect();
                let keys: Vec<u64> = entries.iter().take(lookups.max(1)).map(|e| e.0).collect();
                let mut ops = OpCounter::new();
                let t = Instant::now();
                let table = Oht::build(entries, cfg.z, cfg.epsilon_oht, &mut rng, &mut ops).map_err(failed)?;
                let build_s = t.elapsed().as_secs_f64();
                let mut lops = OpCounter::new();
                let t = Instant::now();
                for k in &keys {
                    let (hit, _) = table.lookup(*k, pingpong::obliv::Bit::ZERO, rng.gen(), &mut lops);
                    if !hit.declassify() {
                        return Err(failed(format!("key missing from table of {n}")));
                    }
                }
                let lookup_us = t.elapsed().as_secs_f64() * 1e6 / keys.len() as f64;
                let row = json!({
                    "n": n,
                    "build_s": build_s,
                    "build_ops": ops.total(),
                    "slots": table.geometry().slots(),
                    "expansion": table.geometry().expansion(),
                    "rebuilds": table.rebuilds(),
                    "lookup_us": lookup_us,
                    "lookup_ops": lops.total() / keys.len() as u64,
                });
                eprintln!("{row}");
                rows.push(row);
            }
            emit(out.as_deref(), &serde_json::to_string_pretty(&rows).map_err(failed)?)?;
            if check {
                trend_check(&rows, "build_s", true)?;
                let l: Vec<f64> = rows.iter().map(|r| r["lookup_us"].as_f64().unwrap()).collect();
                let (lo, hi) = l.iter().fold((f64::MAX, 0f64), |(a, b), x| (a.min(*x), b.max(*x)));
                if hi > 3.0 * lo {
                    return Err(failed(format!("lookup time not flat: {l:?}")));
                }
            }
            Ok(())
        }
        BenchCmd::Aggregation { sizes, check, out } => {
            let sizes = parse_sizes(&sizes)?;
            let mut rows = Vec::new();
            for n in sizes {
                let mut ops = OpCounter::new();
                let t = Instant::now();
                sim_obl_aggregation(n, rng.gen(), &mut ops);
                let row = json!({ "n": n, "time_s": t.elapsed().as_secs_f64(), "ops": ops.total() });
                eprintln!("{row}");
                rows.push(row);
            }
            sim_obl_aggregation(1, 0, &mut NoTrace);
            emit(out.as_deref(), &serde_json::to_string_pretty(&rows).map_err(failed)?)?;
            if check {
                trend_check(&rows, "time_s", false)?;
            }
            Ok(())
        }
    }
}

/// Values of `field` must increase with n; with `superlinear`, faster than n.
fn trend_check(rows: &[serde_json::Value], field: &str, superlinear: bool) -> Res {
    for w in rows.windows(2) {
        let (n0, n1) = (w[0]["n"].as_f64().unwrap(), w[1]["n"].as_f64().unwrap());
        let (t0, t1) = (w[0][field].as_f64().unwrap(), w[1][field].as_f64().unwrap());
        if n1 > n0 && t1 <= t0 {
            return Err(failed(format!("{field} not increasing: n={n0} {t0:.4} vs n={n1} {t1:.4}")));
        }
        if superlinear && n1 > n0 && t1 / t0 <= n1 / n0 {
            return Err(failed(format!("{field} not superlinear between n={n0} and n={n1}")));
        }
    }
    Ok(())
}

fn keygen(k: KeygenArgs) -> Res {
    if k.clients < 2 {
        return Err(usage("--clients must be at least 2"));
    }
    fs::create_dir_all(&k.out).map_err(|e| usage(format!("{}: {e}", k.out.display())))?;
    let mut rng = match k.seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    };
    let path = |name: &str| k.out.join(name);
    let mut services = Vec::new();
    for name in ["ping", "pong"] {
        let keys = ServiceKeyPair::generate(&mut rng);
        write_key_file(&path(&format!("{name}.key")), &keys.secret_bytes()).map_err(usage)?;
        write_key_file(&path(&format!("{name}.pub")), &keys.public().0).map_err(usage)?;
        services.push(keys);
    }
    let params = pingpong::protocol::Params::default();
    let seeds: Vec<u64> = (0..k.clients).map(|_| rng.gen()).collect();
    let mut clients: Vec<Client> = seeds
        .iter()
        .enumerate()
        .map(|(i, s)| Client::new(ClientId(i as u64 + 1), services[0].public(), &params, *s))
        .collect();
    let n = clients.len();
    for i in 0..n {
        let j = (i + 1) % n;
        if clients[i].friend(ClientId(j as u64 + 1)).is_some() {
            continue;
        }
        let (lo, hi) = (i.min(j), i.max(j));
        let (x, y) = clients.split_at_mut(hi);
        befriend(&mut x[lo], &mut y[0], &mut rng).map_err(failed)?;
    }
    let mut roster = String::from("# id seed\n");
    for (c, seed) in clients.iter().zip(&seeds) {
        let lines: Vec<String> = c.friends().filter_map(FriendLine::of).map(|l| l.to_line()).collect();
        let file = path(&format!("client-{}.friends", c.id()));
        fs::write(&file, format!("# id hex_sk hex_sealed_token idx\n{}\n", lines.join("\n")))
            .map_err(|e| usage(format!("{}: {e}", file.display())))?;
        roster.push_str(&format!("{} {seed}\n", c.id()));
    }
    fs::write(path("clients.txt"), roster).map_err(usage)?;
    let ini = format!(
        "[params]\nround_ms = 1000\n\n[ping]\nlisten = 127.0.0.1:7100\nsecret_key = {}\npublic_key = {}\n\n[pong]\nlisten = 127.0.0.1:7200\nsecret_key = {}\npublic_key = {}\n",
        path("ping.key").display(),
        path("ping.pub").display(),
        path("pong.key").display(),
        path("pong.pub").display()
    );
    fs::write(path("pingpong.ini"), ini).map_err(usage)?;
    println!(
        "{}",
        json!({ "out": k.out.display().to_string(), "clients": n, "ping_pub": hex::encode(services[0].public().0), "pong_pub": hex::encode(services[1].public().0) })
    );
    Ok(())
}
