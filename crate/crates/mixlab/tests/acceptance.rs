//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p mixlab --test acceptance`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{Client, TestServer};
use mixlab::analysis::{default_thresholds, group_by_session, project_session, run_study_report};
use mixlab::engine::{Engine, EngineConfig, CHOICE_MS, DEFAULT_GENERATOR_SEED, PLAY_MS};
use mixlab::generator::Backend;
use mixlab::imaging::{encode_png, sha256_hex};
use mixlab::materials::derive_materials;
use mixlab::model::{ModeKind, ModeRef, PROTOCOL};
use mixlab::service::GeneratorChoice;
use mixlab::sim::{simulate_cohort, CohortConfig, PolicyKind};
use mixlab::telemetry::{read_csv, TelemetryStore};
use mixlab_core::render::quantize;
use mixlab_core::rng::SeededRng;
use mixlab_core::stats::{
    kruskal_wallis, mann_whitney_exact_p, mann_whitney_normal, paired_t_test,
};
use mixlab_core::{
    blend, count_worsenings, source_latents, BlendWeights, LatentVector, Renderer,
    DEFAULT_IMAGE_SIZE, DEFAULT_LATENT_DIM,
};
use serde_json::{json, Value};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_latent(rng: &mut SeededRng, dim: usize) -> LatentVector {
    LatentVector::new((0..dim).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap()
}

fn default_renderer() -> Renderer {
    Renderer::new(
        DEFAULT_LATENT_DIM,
        DEFAULT_IMAGE_SIZE,
        DEFAULT_IMAGE_SIZE,
        DEFAULT_GENERATOR_SEED,
    )
    .unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// 1. Blend identities over 1000 seeded cases.
fn blend_math() -> Check {
    const TOL: f64 = 1e-12;
    let mut rng = SeededRng::new(0xB1E4D);
    for case in 0..1000 {
        let n = rng.range_inclusive(3, 6) as usize;
        let sources: Vec<LatentVector> = (0..n).map(|_| random_latent(&mut rng, DEFAULT_LATENT_DIM)).collect();

        // Identity: one raised slider returns that source.
        let i = rng.below(n as u64) as usize;
        let mut h = vec![0u8; n];
        h[i] = rng.range_inclusive(1, 100) as u8;
        let out = blend(&sources, &BlendWeights::from_hundredths(h).unwrap()).unwrap();
        ensure(max_abs_diff(out.as_slice(), sources[i].as_slice()) <= TOL, || {
            format!("identity failed in case {case}")
        })?;

        // Random grid weights for the remaining properties.
        let k = rng.range_inclusive(2, 5) as u8;
        let mut base: Vec<u8> = (0..n).map(|_| rng.range_inclusive(0, i64::from(100 / k)) as u8).collect();
        if base.iter().all(|&v| v == 0) {
            base[rng.below(n as u64) as usize] = 1;
        }
        let w = BlendWeights::from_hundredths(base.clone()).unwrap();
        let out = blend(&sources, &w).unwrap();

        // Independent evaluation of the normalized combination.
        let total: f64 = base.iter().map(|&v| f64::from(v)).sum();
        for d in 0..DEFAULT_LATENT_DIM {
            let expect: f64 = base
                .iter()
                .zip(&sources)
                .map(|(&v, s)| f64::from(v) * s.as_slice()[d])
                .sum::<f64>()
                / total;
            ensure((out.as_slice()[d] - expect).abs() <= TOL, || {
                format!("combination mismatch in case {case}, component {d}")
            })?;
            // Convexity against the sources with nonzero weight.
            let live = base.iter().zip(&sources).filter(|(&v, _)| v > 0).map(|(_, s)| s.as_slice()[d]);
            let (lo, hi) = live.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            ensure(out.as_slice()[d] >= lo - TOL && out.as_slice()[d] <= hi + TOL, || {
                format!("convexity failed in case {case}, component {d}")
            })?;
        }

        // Symmetry: permuting sources with their weights.
        let mut perm: Vec<usize> = (0..n).collect();
        for j in (1..n).rev() {
            perm.swap(j, rng.below(j as u64 + 1) as usize);
        }
        let ps: Vec<LatentVector> = perm.iter().map(|&j| sources[j].clone()).collect();
        let pw = BlendWeights::from_hundredths(perm.iter().map(|&j| base[j]).collect()).unwrap();
        let permuted = blend(&ps, &pw).unwrap();
        ensure(max_abs_diff(permuted.as_slice(), out.as_slice()) <= TOL, || {
            format!("symmetry failed in case {case}")
        })?;

        // Scale invariance: k * w blends to the same vector.
        let scaled = BlendWeights::from_hundredths(base.iter().map(|&v| v * k).collect()).unwrap();
        let s = blend(&sources, &scaled).unwrap();
        ensure(max_abs_diff(s.as_slice(), out.as_slice()) <= TOL, || {
            format!("scale invariance failed in case {case} (k = {k})")
        })?;
    }
    Ok("1000 cases, identity/symmetry/scale/convexity within 1e-12".into())
}

// 2. Byte-identical renders across processes; Lipschitz sampling.
fn renderer_determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("r{k}.png"));
        let o = Command::new(env!("CARGO_BIN_EXE_mixlab"))
            .args(["render", "--weights", "0.3,0.5,0.2", "--seed", "7", "--out", out.to_str().unwrap()])
            .env_remove("LATENT_DIM")
            .output()
            .unwrap();
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        outputs.push(std::fs::read(&out).unwrap());
    }
    let sources = source_latents(3, DEFAULT_LATENT_DIM, 7).unwrap();
    let latent = blend(&sources, &BlendWeights::from_values(&[0.3, 0.5, 0.2]).unwrap()).unwrap();
    let here = encode_png(&default_renderer().render(&latent).unwrap());
    let again = encode_png(&default_renderer().render(&latent).unwrap());
    ensure(outputs[0] == outputs[1], || "two processes disagree".into())?;
    ensure(outputs[0] == here && here == again, || "in-process render differs".into())?;

    let renderer = default_renderer();
    let budget = 0.01 * DEFAULT_LATENT_DIM as f64;
    let mut rng = SeededRng::new(0x11F5);
    let mut worst = 0u8;
    for pair in 0..100 {
        let z = random_latent(&mut rng, DEFAULT_LATENT_DIM);
        let raw: Vec<f64> = (0..DEFAULT_LATENT_DIM).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let l1: f64 = raw.iter().map(|v| v.abs()).sum();
        let scale = budget * rng.uniform(0.5, 1.0) / l1;
        let moved: Vec<f64> = z.as_slice().iter().zip(&raw).map(|(a, d)| a + d * scale).collect();
        let step: f64 = moved.iter().zip(z.as_slice()).map(|(a, b)| (a - b).abs()).sum();
        ensure(step <= budget + 1e-9, || format!("pair {pair}: step {step} over budget"))?;
        let a = renderer.render(&z).unwrap();
        let b = renderer.render(&LatentVector::new(moved).unwrap()).unwrap();
        let diff = a.pixels().iter().zip(b.pixels()).map(|(x, y)| x.abs_diff(*y)).max().unwrap();
        worst = worst.max(diff);
        ensure(diff <= 8, || format!("pair {pair}: channel difference {diff} > 8"))?;
    }
    Ok(format!("2 processes byte-identical; 100 pairs, max channel diff {worst}/255"))
}

// 3. Challenge soundness over 50 levels.
fn challenge_soundness() -> Check {
    let renderer = default_renderer();
    let probes: Vec<(u32, u32)> = {
        let mut rng = SeededRng::new(0x9A0BE);
        (0..16)
            .map(|_| (rng.below(u64::from(DEFAULT_IMAGE_SIZE)) as u32, rng.below(u64::from(DEFAULT_IMAGE_SIZE)) as u32))
            .collect()
    };
    let grid: Vec<BlendWeights> = {
        let mut g = Vec::new();
        for a in 0..=20u8 {
            for b in 0..=20u8 {
                for c in 0..=20u8 {
                    if a + b + c > 0 {
                        g.push(BlendWeights::from_hundredths(vec![a * 5, b * 5, c * 5]).unwrap());
                    }
                }
            }
        }
        g
    };
    let mut levels = 0;
    let mut scanned = 0u64;
    let mut full_renders = 0u64;
    let mut seed = 1000u64;
    while levels < 50 {
        let (materials, _) = derive_materials(seed, &renderer).map_err(|e| e.to_string())?;
        for level in &materials.levels {
            if levels == 50 {
                break;
            }
            levels += 1;
            let correct: Vec<LatentVector> = level.correct_sources().iter().map(|s| s.latent.clone()).collect();
            let target = renderer.render(&blend(&correct, &level.target_weights).unwrap()).unwrap();
            let hash = sha256_hex(&encode_png(&target));
            ensure(hash == level.target_image_hash, || {
                format!("seed {seed} level {}: target weights do not reproduce the target", level.level)
            })?;
            for (s, set) in level.sets.iter().enumerate() {
                if s == usize::from(level.correct_set) {
                    continue;
                }
                let latents: Vec<LatentVector> = set.iter().map(|x| x.latent.clone()).collect();
                for w in &grid {
                    scanned += 1;
                    let z = blend(&latents, w).unwrap();
                    let survives = probes.iter().all(|&(x, y)| {
                        let f = renderer.field_at(&z, x, y).unwrap();
                        let px = target.pixel(x, y);
                        (0..3).all(|c| quantize(f[c]) == px[c])
                    });
                    if survives {
                        full_renders += 1;
                        let img = renderer.render(&z).unwrap();
                        ensure(sha256_hex(&encode_png(&img)) != level.target_image_hash, || {
                            format!(
                                "seed {seed} level {}: distractor set {s} reproduces the target at {:?}",
                                level.level,
                                w.values()
                            )
                        })?;
                    }
                }
            }
        }
        seed += 1;
    }
    Ok(format!(
        "50 levels reproduce their targets; {scanned} distractor grid points never do ({full_renders} needed a full render)"
    ))
}

// 4. Statistics against independent oracles.
fn binomial(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Two-sided Student t p-value for integer df from the closed-form series.
fn t_two_sided_oracle(t: f64, df: u32) -> f64 {
    let nu = f64::from(df);
    let theta = (t.abs() / nu.sqrt()).atan();
    let (s, c) = (theta.sin(), theta.cos());
    let a = if df % 2 == 1 {
        let mut sum = 0.0;
        if df > 1 {
            let mut term = c;
            sum = term;
            let mut k = 3;
            while k <= df - 2 {
                term *= c * c * f64::from(k - 1) / f64::from(k);
                sum += term;
                k += 2;
            }
        }
        2.0 / std::f64::consts::PI * (theta + s * sum)
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 2;
        while k <= df - 2 {
            term *= c * c * f64::from(k - 1) / f64::from(k);
            sum += term;
            k += 2;
        }
        s * sum
    };
    1.0 - a
}

fn statistics_oracles() -> Check {
    // Exact Mann-Whitney p against full enumeration of rank assignments.
    let mut pairs = 0;
    let mut worst: f64 = 0.0;
    for n in 2..=12u32 {
        for na in 1..n {
            let nb = n - na;
            let masks: Vec<u32> = (0u32..1 << n).filter(|m| m.count_ones() == na).collect();
            let u_of = |m: u32| -> usize {
                let rank_sum: u32 = (0..n).filter(|i| m >> i & 1 == 1).map(|i| i + 1).sum();
                (rank_sum - na * (na + 1) / 2) as usize
            };
            let mut counts = vec![0u64; (na * nb + 1) as usize];
            for &m in &masks {
                counts[u_of(m)] += 1;
            }
            let total = binomial(u64::from(n), u64::from(na));
            for &m in &masks {
                let u = u_of(m);
                let lower: u64 = counts[..=u].iter().sum();
                let upper: u64 = counts[u..].iter().sum();
                let want = (2.0 * lower.min(upper) as f64 / total).min(1.0);
                let a: Vec<f64> = (0..n).filter(|i| m >> i & 1 == 1).map(|i| f64::from(i + 1)).collect();
                let b: Vec<f64> = (0..n).filter(|i| m >> i & 1 == 0).map(|i| f64::from(i + 1)).collect();
                let got = mann_whitney_exact_p(&a, &b).map_err(|e| e.to_string())?;
                worst = worst.max((got - want).abs());
                ensure((got - want).abs() <= 1e-9, || {
                    format!("MWU ({na},{nb}) mask {m:b}: {got} vs {want}")
                })?;
                pairs += 1;
            }
        }
    }

    // Paired t against the closed-form t distribution.
    let r = paired_t_test(&[0.0; 4], &[2.0, 2.0, 4.0, 4.0]).map_err(|e| e.to_string())?;
    ensure((r.statistic - 27f64.sqrt()).abs() < 1e-12, || format!("t = {}", r.statistic))?;
    let want = t_two_sided_oracle(r.statistic, 3);
    ensure((r.p_value - want).abs() <= 1e-6 && (r.p_value - 0.0138).abs() < 5e-5, || {
        format!("worked case p = {} vs {want}", r.p_value)
    })?;
    let mut rng = SeededRng::new(0x7E57);
    for case in 0..200 {
        let n = rng.range_inclusive(2, 30) as usize;
        let pre: Vec<f64> = (0..n).map(|_| rng.uniform(1.0, 6.0)).collect();
        let shift = rng.uniform(-1.0, 1.0);
        let post: Vec<f64> = pre.iter().map(|p| p + shift + rng.uniform(-1.5, 1.5)).collect();
        let r = paired_t_test(&pre, &post).map_err(|e| e.to_string())?;
        let want = t_two_sided_oracle(r.statistic, (n - 1) as u32);
        ensure((r.p_value - want).abs() <= 1e-6, || {
            format!("paired t case {case}: {} vs {want}", r.p_value)
        })?;
    }

    // Kruskal-Wallis worked case; chi-square df 2 tail is exp(-H/2).
    let kw = kruskal_wallis(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]).map_err(|e| e.to_string())?;
    ensure((kw.statistic - 7.2).abs() < 1e-12, || format!("H = {}", kw.statistic))?;
    ensure((kw.p_value - (-3.6f64).exp()).abs() <= 1e-6 && (kw.p_value - 0.02732).abs() <= 1e-5, || {
        format!("KW p = {}", kw.p_value)
    })?;

    // Two groups: H equals the squared Mann-Whitney z.
    for case in 0..200 {
        let na = rng.range_inclusive(2, 15) as usize;
        let nb = rng.range_inclusive(2, 15) as usize;
        let tied = case % 2 == 0;
        let mut draw = |k: usize| -> Vec<f64> {
            (0..k)
                .map(|_| if tied { rng.range_inclusive(1, 5) as f64 } else { rng.uniform(0.0, 10.0) })
                .collect()
        };
        let a = draw(na);
        let b = draw(nb);
        let h = kruskal_wallis(&[&a, &b]).map_err(|e| e.to_string())?;
        if h.degenerate {
            continue;
        }
        let (z, _) = mann_whitney_normal(&a, &b).map_err(|e| e.to_string())?;
        ensure((h.statistic - z * z).abs() <= 1e-9, || {
            format!("two-group case {case}: H {} vs z^2 {}", h.statistic, z * z)
        })?;
    }
    Ok(format!(
        "{pairs} MWU arrangements (max |dp| {worst:.1e}); t/KW/H=z^2 oracles agree"
    ))
}

// 5. Simulated cohort reproduces the expected study shape.
fn oracle_pipeline() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::new(
        Arc::new(TelemetryStore::open(dir.path()).unwrap()),
        EngineConfig::default(),
        Backend::Procedural,
    );
    let cfg = CohortConfig::default();
    ensure(cfg.sessions == 8 && cfg.challenge_step_cap == 0.05 && cfg.free_step_cap == 1.0, || {
        "unexpected default cohort".into()
    })?;
    let ids = simulate_cohort(&engine, &cfg).map_err(|e| e.to_string())?;
    let cohort: Vec<_> = ids.iter().map(|id| engine.events(id).unwrap()).collect();
    let report = run_study_report(&cohort, &default_thresholds()).map_err(|e| e.to_string())?;
    ensure(report.convergence.len() == 24, || format!("{} convergence rows", report.convergence.len()))?;
    for row in &report.convergence {
        let s = row.series.series().ok_or("incomparable challenge series")?;
        ensure(s.windows(2).all(|w| w[1] <= w[0]), || format!("{} level {} increases", row.session_id, row.level))?;
        ensure(*s.last().unwrap() == 0.0, || format!("{} level {} ends above 0", row.session_id, row.level))?;
        let w = row.worsenings.ok_or("no worsening count")?;
        ensure(w.max_consecutive <= 2, || "too many consecutive worsenings".into())?;
    }
    let challenge = report.cdf_at(ModeKind::Challenge, 0.2).ok_or("no challenge CDF")?;
    let creatures = report.cdf_at(ModeKind::Creatures, 0.2).ok_or("no creatures CDF")?;
    let openplay = report.cdf_at(ModeKind::OpenPlay, 0.2).ok_or("no open play CDF")?;
    ensure(challenge == 1.0, || format!("challenge CDF(0.2) = {challenge}"))?;
    ensure(creatures < 0.5 && openplay < 0.5, || format!("free CDF(0.2) = {creatures}, {openplay}"))?;
    let get = |name: &str| -> Result<mixlab_core::stats::TestResult, String> {
        let t = report.test(name).ok_or(format!("missing {name}"))?;
        t.result.clone().map_err(|e| format!("{name}: {e}"))
    };
    let kw = get("kruskal_wallis")?;
    ensure(kw.p_value < 1e-3, || format!("KW p = {}", kw.p_value))?;
    let mut rhos = Vec::new();
    for name in ["mann_whitney_creatures_challenge", "mann_whitney_challenge_openplay"] {
        let t = get(name)?;
        ensure(t.p_value < 1e-3 && t.effect > 0.5, || format!("{name}: p {} rho {}", t.p_value, t.effect))?;
        rhos.push(t.effect);
    }
    ensure(report.tests.iter().filter(|t| t.name.starts_with("mann_whitney")).count() == 3, || {
        "expected three Mann-Whitney rows".into()
    })?;

    // Explorative challenge players with the same bound also converge.
    let small = tempfile::tempdir().unwrap();
    let e2 = Engine::new(
        Arc::new(TelemetryStore::open(small.path()).unwrap()),
        common::small(),
        Backend::Procedural,
    );
    let explore = CohortConfig {
        challenge_policy: PolicyKind::Explorative,
        challenge_inter_action_ms: 500,
        ..CohortConfig::default()
    };
    let ids = simulate_cohort(&e2, &explore).map_err(|e| e.to_string())?;
    let mut worst = 0;
    let mut total = 0;
    for id in &ids {
        let s = project_session(&e2.events(id).unwrap()).map_err(|e| e.to_string())?;
        for level in 1..=3 {
            let m = s.mode(ModeRef::challenge(level)).ok_or("missing level")?;
            let conv = m.convergence().ok_or("no series")?.map_err(|e| e.to_string())?;
            let series = conv.series().ok_or("incomparable")?.to_vec();
            let w = count_worsenings(&series);
            worst = worst.max(w.max_consecutive);
            total += w.total;
            ensure(w.max_consecutive <= 2 && *series.last().unwrap() == 0.0, || {
                format!("explorative {id} level {level}: {series:?}")
            })?;
        }
    }
    ensure(total > 0, || "explorative players never worsened".into())?;
    Ok(format!(
        "8 sessions: CDF(0.2) challenge {challenge:.3}, creatures {creatures:.3}, openplay {openplay:.3}; KW p {:.1e}; rho {:.3}/{:.3}; explorative {total} worsenings, max run {worst}",
        kw.p_value, rhos[0], rhos[1]
    ))
}

// 6. Crash recovery and CSV round trip.
fn durability() -> Check {
    let mut total_acked = 0;
    for point in 0..100u64 {
        let mut rng = SeededRng::new(0xDEAD ^ point);
        let dir = tempfile::tempdir().unwrap();
        let acked = {
            let e = common::engine(dir.path());
            e.start_session("d", point, common::T0).map_err(|e| e.to_string())?;
            e.start_mode("d", ModeRef::new(ModeKind::Creatures, None), common::T0).unwrap();
            let mut t = common::T0;
            for _ in 0..rng.below(10) {
                t += 1 + rng.below(5_000);
                let mut w = [0.0; 6];
                w[rng.below(6) as usize] = (1 + rng.below(100)) as f64 / 100.0;
                e.generate("d", &w, t).unwrap();
            }
            e.events("d").unwrap()
        };
        total_acked += acked.len();
        let mut next = acked.last().unwrap().clone();
        next.seq += 1;
        let line = serde_json::to_vec(&next).unwrap();
        let cut = rng.below(line.len() as u64) as usize;
        let path = dir.path().join("sessions").join("d.jsonl");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&line[..cut]);
        std::fs::write(&path, bytes).unwrap();
        let e = common::engine(dir.path());
        let restored = e.events("d").map_err(|e| format!("point {point}: {e}"))?;
        ensure(restored == acked, || format!("crash point {point}: events differ"))?;
    }

    let dir = tempfile::tempdir().unwrap();
    let e = common::engine(dir.path());
    let ids = simulate_cohort(&e, &CohortConfig { sessions: 4, seed: 23, ..CohortConfig::default() })
        .map_err(|e| e.to_string())?;
    let csv = dir.path().join("cohort.csv");
    e.store().export_csv(&ids, &csv).map_err(|e| e.to_string())?;
    let reread = group_by_session(read_csv(std::fs::File::open(&csv).unwrap()).map_err(|e| e.to_string())?);
    ensure(reread.len() == ids.len(), || "session count changed".into())?;
    let mut series = 0;
    for (id, back) in ids.iter().zip(&reread) {
        let a = project_session(&e.events(id).unwrap()).map_err(|e| e.to_string())?;
        let b = project_session(back).map_err(|e| e.to_string())?;
        for mode in PROTOCOL {
            let x = a.mode(mode).unwrap().step_sizes().map_err(|e| e.to_string())?;
            let y = b.mode(mode).unwrap().step_sizes().map_err(|e| e.to_string())?;
            ensure(x == y, || format!("{id} {mode}: step sizes differ"))?;
            series += 1;
        }
    }
    Ok(format!(
        "100 crash points, {total_acked} acked events recovered; {series} step-size series identical after CSV"
    ))
}

// 7. Endpoint contract against a live server.
struct Live {
    server: TestServer,
    client: Client,
    codes: Vec<String>,
}

impl Live {
    fn post(&self, path: &str, body: Value) -> common::Reply {
        self.client.post(&self.server.url(path), &body.to_string())
    }

    fn ok(&self, path: &str, body: Value) -> Result<Value, String> {
        let r = self.post(path, body);
        ensure((200..300).contains(&r.status), || {
            format!("{path}: {} {}", r.status, String::from_utf8_lossy(&r.body))
        })?;
        Ok(r.json())
    }

    fn fails(&mut self, path: &str, body: Value, status: u16, code: &str) -> Result<(), String> {
        let r = self.post(path, body);
        ensure(r.status == status && r.code() == code, || {
            format!("{path}: expected {status} {code}, got {} {}", r.status, String::from_utf8_lossy(&r.body))
        })?;
        self.codes.push(code.to_owned());
        Ok(())
    }

    fn events(&self, id: &str) -> usize {
        let r = self.client.get(&self.server.url(&format!("/sessions/{id}/events")));
        String::from_utf8(r.body).unwrap().lines().count()
    }
}

fn api_conformance() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut api = Live {
        server: TestServer::start(dir.path(), GeneratorChoice::Procedural),
        client: Client::default(),
        codes: Vec::new(),
    };
    let health = api.client.get(&api.server.url("/health"));
    ensure(health.json() == json!({"status": "ok"}), || "health".into())?;
    let created = api.post("/sessions", json!({}));
    ensure(created.status == 201, || format!("create: {}", created.status))?;
    let id = created.json()["session_id"].as_str().unwrap().to_owned();
    let p = |s: &str| format!("/sessions/{id}{s}");
    let state = api.client.get(&api.server.url(&p(""))).json();
    ensure(state["current_mode"].is_null(), || "fresh session has a mode".into())?;

    api.fails("/sessions/nobody", json!({}), 404, "UNKNOWN_SESSION").ok();
    let r = api.client.get(&api.server.url("/sessions/nobody"));
    ensure(r.status == 404 && r.code() == "UNKNOWN_SESSION", || "unknown session".into())?;
    api.fails("/sessions/nobody/generate", json!({"weights": [1]}), 404, "UNKNOWN_SESSION")?;
    api.fails(&p("/generate"), json!({"weights": [1, 0, 0, 0, 0, 0]}), 409, "NO_ACTIVE_MODE")?;
    api.fails(&p("/modes/openplay/start"), json!({}), 409, "OUT_OF_ORDER")?;
    api.fails(&p("/modes/creatures/start"), json!({"level": 1}), 422, "INVALID_LEVEL")?;
    api.fails(&p("/survey"), json!({"question_id": "playfulness", "rating": 4}), 409, "MODES_INCOMPLETE")?;
    api.fails(&p("/end"), json!({}), 409, "MODES_INCOMPLETE")?;
    let r = api.client.post(&api.server.url(&p("/generate")), "{\"weights\": [1,");
    ensure(r.status == 400 && r.code() == "MALFORMED_BODY", || "malformed body".into())?;

    let mut count = 1;
    api.ok(&p("/modes/creatures/start"), json!({}))?;
    count += 1;
    api.fails(&p("/modes/creatures/start"), json!({}), 409, "MODE_ALREADY_ACTIVE")?;
    api.fails(&p("/generate"), json!({"weights": [0, 0, 0, 0, 0, 0]}), 422, "ALL_ZERO_WEIGHTS")?;
    api.fails(&p("/generate"), json!({"weights": [1, 1]}), 422, "LENGTH_MISMATCH")?;
    api.fails(&p("/generate"), json!({"weights": [0.005, 0, 0, 0, 0, 0]}), 422, "WEIGHT_OUT_OF_RANGE")?;
    api.server.clock.advance(2_000);
    let g = api.ok(&p("/generate"), json!({"weights": [0.25, 0, 0, 0.75, 0, 0]}))?;
    count += 1;
    let hash = g["image_hash"].as_str().unwrap().to_owned();
    ensure(g["seq"] == json!(count - 1) && hash.len() == 64, || format!("generate reply {g}"))?;
    let img = api.client.get(&api.server.url(&format!("/images/{hash}.png")));
    let stored = std::fs::read(dir.path().join("images").join(format!("{hash}.png"))).unwrap();
    ensure(img.status == 200 && img.body == stored && sha256_hex(&img.body) == hash, || {
        "image bytes are not content-addressed".into()
    })?;
    api.fails(&p("/save"), json!({"image_hash": "ab".repeat(32)}), 422, "UNKNOWN_IMAGE")?;
    api.ok(&p("/save"), json!({"image_hash": hash}))?;
    count += 1;
    api.fails(&p("/save"), json!({"image_hash": hash}), 409, "DUPLICATE_SAVE")?;
    ensure(api.events(&id) == count, || "rejected saves were logged".into())?;
    api.server.clock.advance(PLAY_MS);
    api.fails(&p("/generate"), json!({"weights": [1, 0, 0, 0, 0, 0]}), 409, "DEADLINE_PASSED")?;

    api.ok(&p("/modes/challenge/start"), json!({"level": 1}))?;
    count += 2; // lapsed creatures timer, then the start
    api.fails(&p("/generate"), json!({"weights": [1, 0, 0]}), 409, "MODE_NOT_PLAYING")?;
    api.fails(&p("/challenge/choose"), json!({"set_index": 3}), 422, "INVALID_SET_INDEX")?;
    api.ok(&p("/challenge/choose"), json!({"set_index": 0}))?;
    count += 1;
    api.fails(&p("/challenge/choose"), json!({"set_index": 0}), 409, "NOT_IN_CHOICE_PHASE")?;
    ensure(api.events(&id) == count, || "replayed choice was logged".into())?;
    let g2 = api.ok(&p("/generate"), json!({"weights": [0.5, 0.5, 0]}))?;
    count += 1;
    api.fails(&p("/save"), json!({"image_hash": g2["image_hash"]}), 409, "WRONG_MODE")?;
    api.ok(&p("/finish"), json!({}))?;
    count += 1;
    api.fails(&p("/finish"), json!({}), 409, "NO_ACTIVE_MODE")?;

    api.ok(&p("/modes/challenge/start"), json!({"level": 2}))?;
    count += 1;
    api.server.clock.advance(CHOICE_MS + 1);
    api.fails(&p("/challenge/choose"), json!({"set_index": 1}), 409, "DEADLINE_PASSED")?;
    api.server.clock.advance(PLAY_MS);
    api.ok(&p("/modes/challenge/start"), json!({"level": 3}))?;
    count += 3;
    api.ok(&p("/challenge/choose"), json!({"set_index": 2}))?;
    api.ok(&p("/finish"), json!({}))?;
    api.ok(&p("/modes/openplay/start"), json!({}))?;
    api.ok(&p("/finish"), json!({}))?;
    count += 4;
    api.fails(&p("/survey"), json!({"question_id": "control_end", "rating": 0}), 422, "OUT_OF_RANGE")?;
    for q in ["control_start", "control_end", "playfulness"] {
        api.ok(&p("/survey"), json!({"question_id": q, "rating": 5}))?;
        count += 1;
    }
    api.fails(&p("/survey"), json!({"question_id": "playfulness", "rating": 2}), 409, "DUPLICATE_ANSWER")?;
    api.ok(&p("/end"), json!({}))?;
    count += 1;
    api.fails(&p("/end"), json!({}), 409, "SESSION_ENDED")?;
    ensure(api.events(&id) == count, || format!("expected {count} events, found {}", api.events(&id)))?;

    // Clock regression on a second session.
    let other = api.post("/sessions", json!({})).json()["session_id"].as_str().unwrap().to_owned();
    api.server.clock.advance(5_000);
    api.ok(&format!("/sessions/{other}/modes/creatures/start"), json!({}))?;
    api.server.clock.set(common::T0);
    api.fails(&format!("/sessions/{other}/generate"), json!({"weights": [1, 0, 0, 0, 0, 0]}), 409, "CLOCK_REGRESSION")?;

    // A corrupt log surfaces as its own code.
    std::fs::write(dir.path().join("sessions").join("broken.jsonl"), "{\"seq\": 0}\n").unwrap();
    let r = api.client.get(&api.server.url("/sessions/broken"));
    ensure(r.status == 500 && r.code() == "CORRUPT_SESSION", || format!("corrupt log: {}", r.status))?;
    api.codes.push("CORRUPT_SESSION".into());

    // Generator faults map to gateway errors.
    let remote_dir = tempfile::tempdir().unwrap();
    let mut remote = Live {
        server: TestServer::start(remote_dir.path(), GeneratorChoice::Remote("http://127.0.0.1:9".into())),
        client: Client::default(),
        codes: Vec::new(),
    };
    let rid = remote.post("/sessions", json!({})).json()["session_id"].as_str().unwrap().to_owned();
    remote.ok(&format!("/sessions/{rid}/modes/creatures/start"), json!({}))?;
    remote.fails(&format!("/sessions/{rid}/generate"), json!({"weights": [1, 0, 0, 0, 0, 0]}), 502, "REMOTE_UNAVAILABLE")?;
    ensure(remote.client.get(&remote.server.url("/health")).status == 200, || "remote fault took the server down".into())?;
    api.codes.extend(remote.codes);

    api.codes.sort();
    api.codes.dedup();
    Ok(format!("{} distinct error codes verified; replayed mutations rejected; images content-addressed", api.codes.len()))
}

struct Criterion {
    number: u8,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { number: 1, name: "blend math", budget: Some(Duration::from_secs(1)), run: blend_math },
        Criterion { number: 2, name: "renderer determinism and continuity", budget: Some(Duration::from_secs(10)), run: renderer_determinism },
        Criterion { number: 3, name: "challenge soundness", budget: Some(Duration::from_secs(120)), run: challenge_soundness },
        Criterion { number: 4, name: "statistics oracle equivalence", budget: Some(Duration::from_secs(30)), run: statistics_oracles },
        Criterion { number: 5, name: "oracle-player pipeline", budget: Some(Duration::from_secs(60)), run: oracle_pipeline },
        Criterion { number: 6, name: "telemetry durability and round trip", budget: None, run: durability },
        Criterion { number: 7, name: "API conformance", budget: Some(Duration::from_secs(30)), run: api_conformance },
    ];
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.number)) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {}. {} ({elapsed:.2?}): {detail}", c.number, c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {} ({elapsed:.2?}): {why}", c.number, c.name);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
