//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are always printed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod support;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ctevidence_core::agent::{Agent, RunConfig, DEFAULT_QUERY};
use ctevidence_core::eval::{
    bleu1, evaluate_cohort, meteor_exact, oversegmentation_flag, prf1, rouge_l, CaseInput,
    GoldLabels, LabelSet, Lexicon, LexiconClassifier, Prf1, SensitivityReport, DEFAULT_KS,
};
use ctevidence_core::llm::{Fixture, ScriptedBackend};
use ctevidence_core::pathology::{PATHOLOGIES, PATHOLOGY_COUNT};
use ctevidence_core::radiomics::{
    absolute_volume, estimate_midplanes, hu_statistics, laterality_fractions,
    orientation_fractions, FeatureVector, ToolRegistry, HU_PERCENTILES,
};
use ctevidence_core::retrieval::{Index, ReferenceEntry, RetrievalError};
use ctevidence_core::snippets::{
    build_extraction_prompt, canonical_negative, template_f1_verify, ExtractedSnippet,
    ExtractionPromptSet,
};
use ctevidence_core::volume::{
    load_mask, load_study, load_volume, make_phantom, save_mask, save_study, save_volume,
    EllipsoidSpec, Laterality, Mask, PhantomSpec, Volume, VolumeError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use support::*;

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

// `!(a < b)` on purpose: NaN must fail the check.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const KNN_LIMIT: Duration = Duration::from_secs(60);
const RADIOMICS_LIMIT: Duration = Duration::from_secs(120);
const COHORT_LIMIT: Duration = Duration::from_secs(120);
const DISTANCE_RTOL: f64 = 1e-12;
const MOMENT_TOL: f64 = 1e-9;
const METRIC_TOL: f64 = 1e-9;
const SPHERE_RTOL: f64 = 0.02;

fn main() {
    let criteria: [Criterion; 9] = [
        ("knn exactness against brute force", knn_exactness),
        (
            "standardization moments and affine invariance",
            standardization,
        ),
        ("radiomics oracle suite", radiomics_oracles),
        ("agent determinism and protocol", agent_protocol),
        ("end-to-end phantom cohort fidelity", cohort_fidelity),
        ("metric correctness", metric_correctness),
        ("published cohort arithmetic", published_arithmetic),
        ("snippet pipeline", snippet_pipeline),
        ("file format round trips", format_round_trips),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(()) => println!("PASS {} {name} ({secs:.2} s)", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {} {name} ({secs:.2} s): {e}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---- 1, 2: retrieval

fn random_partition(
    rng: &mut ChaCha8Rng,
    pathology: &str,
    n: usize,
    d: usize,
) -> Vec<ReferenceEntry> {
    let names: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    let constant: Vec<Option<f64>> = (0..d)
        .map(|_| rng.gen_bool(0.1).then(|| rng.gen_range(-5.0..5.0)))
        .collect();
    let scales: Vec<f64> = (0..d)
        .map(|_| 10f64.powf(rng.gen_range(-2.0..3.0)))
        .collect();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && rng.gen_bool(0.05) {
            let j = rng.gen_range(0..i);
            rows.push(rows[j].clone());
            continue;
        }
        rows.push(
            (0..d)
                .map(|j| constant[j].unwrap_or_else(|| rng.gen_range(-1.0..1.0) * scales[j]))
                .collect(),
        );
    }
    rows.into_iter()
        .enumerate()
        .map(|(i, row)| ReferenceEntry {
            entry_id: (i * 7 + 3) as u64,
            pathology_id: pathology.into(),
            features: fv(pathology, &names, &row),
            snippet: format!("snippet {i}"),
            source_id: format!("s{i}"),
        })
        .collect()
}

fn fv(pathology: &str, names: &[String], row: &[f64]) -> FeatureVector {
    FeatureVector::new(
        "acc/v1",
        pathology,
        names.iter().cloned().zip(row.iter().copied()).collect(),
        &[],
    )
    .unwrap()
}

/// Population moments with the unit-std rule for constant columns.
fn oracle_moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut means = vec![0.0; d];
    let mut stds = vec![0.0; d];
    for j in 0..d {
        means[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n;
        stds[j] = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
    }
    (means, stds)
}

/// `(entry_id, distance)` sorted by distance then id.
fn oracle_knn(entries: &[ReferenceEntry], query: &[f64], k: usize) -> Vec<(u64, f64)> {
    let rows: Vec<Vec<f64>> = entries
        .iter()
        .map(|e| e.features.values().to_vec())
        .collect();
    let (m, s) = oracle_moments(&rows);
    let z = |r: &[f64]| -> Vec<f64> {
        r.iter()
            .zip(&m)
            .zip(&s)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let zq = z(query);
    let mut all: Vec<(u64, f64)> = entries
        .iter()
        .zip(&rows)
        .map(|(e, r)| {
            let ze = z(r);
            let d2: f64 = ze.iter().zip(&zq).map(|(a, b)| (a - b) * (a - b)).sum();
            (e.entry_id, d2.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()).max(1.0)
}

fn knn_exactness() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let partitions = 100;
    let mut queries_checked = 0;
    for p in 0..partitions {
        let n = if p % 10 == 0 {
            rng.gen_range(1..14)
        } else {
            rng.gen_range(1..=2000)
        };
        let d = rng.gen_range(1..=20);
        let entries = random_partition(&mut rng, "P", n, d);
        let names = entries[0].features.names().to_vec();
        let index = Index::build(entries.clone()).map_err(|e| e.to_string())?;
        for q in 0..5 {
            let query: Vec<f64> = if q == 0 {
                entries[rng.gen_range(0..n)].features.values().to_vec()
            } else {
                (0..d).map(|_| rng.gen_range(-50.0..50.0)).collect()
            };
            for &k in &DEFAULT_KS {
                let got = index
                    .knn_query("P", &fv("P", &names, &query), k)
                    .map_err(|e| e.to_string())?;
                let want = oracle_knn(&entries, &query, k);
                ensure!(
                    got.len() == k.min(n),
                    "partition {p}: {} results for k={k}, n={n}",
                    got.len()
                );
                let got_ids = got.ids();
                let want_ids: Vec<u64> = want.iter().map(|w| w.0).collect();
                ensure!(
                    got_ids == want_ids,
                    "partition {p} k={k}: ids {got_ids:?} vs oracle {want_ids:?}"
                );
                for (g, w) in got.neighbors.iter().zip(&want) {
                    ensure!(
                        close(g.distance, w.1, DISTANCE_RTOL),
                        "partition {p}: distance {} vs {}",
                        g.distance,
                        w.1
                    );
                }
                queries_checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < KNN_LIMIT, "took {elapsed:?}");
    println!("  {partitions} partitions, {queries_checked} queries");
    Ok(())
}

fn standardization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in 0..40 {
        let n = rng.gen_range(2..400);
        let d = rng.gen_range(1..=20);
        let entries = random_partition(&mut rng, "P", n, d);
        let names = entries[0].features.names().to_vec();
        let index = Index::build(entries.clone()).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f64>> = entries
            .iter()
            .map(|e| e.features.values().to_vec())
            .collect();
        for j in 0..d {
            let raw: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            if raw.iter().all(|&v| v == raw[0]) {
                continue;
            }
            let z: Vec<f64> = (0..n)
                .map(|i| index.standardized_row("P", i).unwrap()[j])
                .collect();
            let mean = z.iter().sum::<f64>() / n as f64;
            let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            ensure!(
                mean.abs() < MOMENT_TOL,
                "partition {p} dim {j}: mean {mean:e}"
            );
            ensure!(
                (std - 1.0).abs() < MOMENT_TOL,
                "partition {p} dim {j}: std {std}"
            );
        }

        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..10.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let map = |r: &[f64]| -> Vec<f64> {
            r.iter().enumerate().map(|(j, v)| a[j] * v + b[j]).collect()
        };
        let mapped: Vec<ReferenceEntry> = entries
            .iter()
            .map(|e| ReferenceEntry {
                features: fv("P", &names, &map(e.features.values())),
                ..e.clone()
            })
            .collect();
        let mapped_index = Index::build(mapped).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-20.0..20.0)).collect();
            for &k in &DEFAULT_KS {
                let x = index.knn_query("P", &fv("P", &names, &q), k).unwrap().ids();
                let y = mapped_index
                    .knn_query("P", &fv("P", &names, &map(&q)), k)
                    .unwrap()
                    .ids();
                ensure!(
                    x == y,
                    "partition {p} k={k}: affine map changed ids {x:?} -> {y:?}"
                );
            }
        }
    }
    Ok(())
}

// ---- 3: radiomics

fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3]) -> Mask {
    let n = dims.iter().product();
    let density = rng.gen_range(0.02..0.6);
    let mut v: Vec<u8> = (0..n).map(|_| rng.gen_bool(density) as u8).collect();
    if v.iter().all(|&b| b == 0) {
        v[rng.gen_range(0..n)] = 1;
    }
    Mask::new("m", dims, spacing, v).unwrap()
}

/// Voxel counts about the plane: centers at or beyond `plane` vs before it.
fn count_split(mask: &Mask, axis: usize, plane: f64, on_plane_high: bool) -> (usize, usize) {
    let s = mask.spacing()[axis];
    let [nx, ny, nz] = mask.dims();
    let (mut high, mut low) = (0, 0);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.get(x, y, z) {
                    continue;
                }
                let c = ([x, y, z][axis] as f64 + 0.5) * s;
                if c > plane || (on_plane_high && c == plane) {
                    high += 1;
                } else {
                    low += 1;
                }
            }
        }
    }
    (high, low)
}

fn translate(mask: &Mask, t: [usize; 3]) -> Mask {
    let [nx, ny, nz] = mask.dims();
    let dims = [nx + t[0], ny + t[1], nz + t[2]];
    let mut out = Mask::empty("m", dims, mask.spacing()).unwrap();
    for (x, y, z) in mask.iter_set() {
        out.set(x + t[0], y + t[1], z + t[2], true);
    }
    out
}

fn mirror_x(mask: &Mask) -> Mask {
    let [nx, _, _] = mask.dims();
    let mut out = Mask::empty("m", mask.dims(), mask.spacing()).unwrap();
    for (x, y, z) in mask.iter_set() {
        out.set(nx - 1 - x, y, z, true);
    }
    out
}

fn radiomics_oracles() -> Check {
    let start = Instant::now();
    let sphere = PhantomSpec {
        study_id: "sphere".into(),
        dims: [64, 64, 64],
        spacing_mm: [1.0, 1.0, 1.0],
        organs: vec![EllipsoidSpec {
            structure_id: "ball".into(),
            center_mm: [32.0, 32.0, 32.0],
            semi_axes_mm: [20.0, 20.0, 20.0],
            hu_value: 40.0,
        }],
        lesions: vec![],
        background_hu: -1000.0,
        rng_seed: 0,
        noise_hu: 0,
    };
    let study = make_phantom(&sphere).map_err(|e| e.to_string())?;
    let analytic = 4.0 / 3.0 * std::f64::consts::PI * 20f64.powi(3);
    let vol = absolute_volume(study.mask("ball").unwrap());
    ensure!(
        (vol - analytic).abs() / analytic < SPHERE_RTOL,
        "sphere volume {vol} vs {analytic}"
    );

    let left = chest(
        "lat",
        Findings {
            effusion: Some(Laterality::Left),
            ..Default::default()
        },
    );
    let planes = estimate_midplanes(&left);
    let lf = laterality_fractions(
        left.mask("pleural_effusion_region").unwrap(),
        planes.midline_x_mm,
    );
    ensure!(lf == Some((1.0, 0.0)), "left lesion fractions {lf:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50 {
        let dims = [
            2 * rng.gen_range(2..12),
            rng.gen_range(3..20),
            rng.gen_range(3..16),
        ];
        let spacing = [
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.5..5.0),
        ];
        let mask = random_mask(&mut rng, dims, spacing);

        // planes on voxel boundaries, plus one on a voxel center
        let jx = rng.gen_range(0..=dims[0]) as f64;
        let jy = rng.gen_range(0..=dims[1]) as f64;
        for (mx, my) in [
            (jx * spacing[0], jy * spacing[1]),
            (
                (jx.min(dims[0] as f64 - 1.0) + 0.5) * spacing[0],
                (jy.min(dims[1] as f64 - 1.0) + 0.5) * spacing[1],
            ),
        ] {
            let (l, r) = laterality_fractions(&mask, mx).unwrap();
            let (cl, cr) = count_split(&mask, 0, mx, true);
            let n = (cl + cr) as f64;
            ensure!(
                l == cl as f64 / n && r == cr as f64 / n,
                "case {case}: laterality ({l}, {r}) vs counts ({cl}, {cr})"
            );
            ensure!(l + r == 1.0, "case {case}: laterality sums to {}", l + r);
            let (a, p) = orientation_fractions(&mask, my).unwrap();
            let (cp, ca) = count_split(&mask, 1, my, false);
            ensure!(
                a == ca as f64 / n && p == cp as f64 / n,
                "case {case}: orientation ({a}, {p}) vs counts ({ca}, {cp})"
            );
            ensure!(a + p == 1.0, "case {case}: orientation sums to {}", a + p);
        }

        let mid = dims[0] as f64 * spacing[0] / 2.0;
        let (l, r) = laterality_fractions(&mask, mid).unwrap();
        let (ml, mr) = laterality_fractions(&mirror_x(&mask), mid).unwrap();
        ensure!(
            (ml, mr) == (r, l),
            "case {case}: mirror gave ({ml}, {mr}) from ({l}, {r})"
        );

        let t = [
            rng.gen_range(0..6),
            rng.gen_range(0..6),
            rng.gen_range(0..6),
        ];
        let moved = translate(&mask, t);
        ensure!(
            absolute_volume(&moved) == absolute_volume(&mask),
            "case {case}: volume not translation invariant"
        );
        let lx = jx * spacing[0];
        ensure!(
            laterality_fractions(&moved, lx + t[0] as f64 * spacing[0])
                == laterality_fractions(&mask, lx),
            "case {case}: laterality not translation invariant"
        );
        let ly = jy * spacing[1];
        ensure!(
            orientation_fractions(&moved, ly + t[1] as f64 * spacing[1])
                == orientation_fractions(&mask, ly),
            "case {case}: orientation not translation invariant"
        );

        let n: usize = dims.iter().product();
        let hu: Vec<i16> = (0..n).map(|_| rng.gen_range(-1024..=3071)).collect();
        let volume = Volume::new(dims, spacing, hu.clone()).unwrap();
        for window in [None, Some((-200i16, 400i16))] {
            let mut sample: Vec<i16> = hu
                .iter()
                .zip(mask.voxels())
                .filter(|(v, &m)| m == 1 && window.is_none_or(|(lo, hi)| **v >= lo && **v <= hi))
                .map(|(v, _)| *v)
                .collect();
            sample.sort();
            let stats = hu_statistics(&volume, &mask, &HU_PERCENTILES, window);
            if sample.is_empty() {
                ensure!(stats.is_none(), "case {case}: stats on an empty sample");
                continue;
            }
            let stats = stats.ok_or(format!("case {case}: missing stats"))?;
            for &q in &HU_PERCENTILES {
                let rank = ((q as usize * sample.len()).div_ceil(100)).max(1);
                let want = sample[rank - 1] as f64;
                ensure!(
                    stats.percentile(q) == Some(want),
                    "case {case}: p{q} {:?} vs {want}",
                    stats.percentile(q)
                );
            }
            ensure!(
                stats.min == sample[0] as f64 && stats.max == *sample.last().unwrap() as f64,
                "case {case}: min/max"
            );
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < RADIOMICS_LIMIT, "took {elapsed:?}");
    Ok(())
}

// ---- 4: agent

fn numeric_tokens(line: &str) -> usize {
    line.split_whitespace()
        .filter(|t| {
            t.trim_matches(|c| "[](),:".contains(c))
                .parse::<f64>()
                .is_ok()
        })
        .count()
}

fn agent_protocol() -> Check {
    let reg = ToolRegistry::default_registry();
    let dir = tempfile::tempdir().unwrap();
    let study_dir = dir.path().join("study");
    let study = chest(
        "case-a",
        Findings {
            effusion: Some(Laterality::Left),
            pericardial: true,
            calcified: false,
        },
    );
    save_study(&study, &study_dir).unwrap();
    let index = reference_index(&reg);
    write_index(&index, &dir.path().join("index.jsonl"));
    let calls_per_step = 3;
    fallback_fixture(
        &dir.path().join("fixture.jsonl"),
        calls_per_step * reg.tools.len(),
        "Scripted findings.",
    );
    let config = serde_json::json!({
        "index": "index.jsonl",
        "backend": {"kind": "scripted", "fixture": "fixture.jsonl"},
        "run": {"parse_retries": calls_per_step - 1},
    });
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, config.to_string()).unwrap();

    let run = |out: &str| {
        let out = dir.path().join(out);
        let o = ctevidence(&[
            "--config",
            path_str(&config_path),
            "agent",
            "run",
            "--study",
            path_str(&study_dir),
            "--mode",
            "template",
            "--k",
            "5",
            "--out",
            path_str(&out),
        ]);
        (o, out)
    };
    let (o1, out1) = run("run1");
    ensure!(
        o1.status.success(),
        "agent run failed: {}",
        String::from_utf8_lossy(&o1.stderr)
    );
    let (o2, out2) = run("run2");
    ensure!(
        o2.status.success(),
        "second agent run failed: {}",
        String::from_utf8_lossy(&o2.stderr)
    );
    for f in ["report.txt", "trace.json"] {
        let a = std::fs::read(out1.join(f)).unwrap();
        let b = std::fs::read(out2.join(f)).unwrap();
        ensure!(a == b, "{f} differs between runs");
    }

    let trace: Value =
        serde_json::from_slice(&std::fs::read(out1.join("trace.json")).unwrap()).unwrap();
    let steps = trace["steps"].as_array().ok_or("trace without steps")?;
    ensure!(steps.len() == reg.tools.len(), "{} steps", steps.len());
    for (i, (s, tool)) in steps.iter().zip(&reg.tools).enumerate() {
        ensure!(s["step"] == i + 1, "step numbering at {i}");
        ensure!(
            s["decision"]["action"] == tool.pathology_id.as_str(),
            "step {i} took {} not {}",
            s["decision"]["action"],
            tool.pathology_id
        );
        ensure!(
            s["decision"]["fallback"] == true,
            "step {i} not marked as fallback"
        );
        let n = s["neighbors"]["neighbors"].as_array().map_or(0, Vec::len);
        let partition = index.partition_len(&tool.pathology_id).unwrap();
        ensure!(n == 5usize.min(partition), "step {i}: {n} neighbors");
    }
    ensure!(trace["fallback_used"] == true, "fallback_used not set");
    ensure!(
        trace["termination"] == "all_tools_visited",
        "termination {}",
        trace["termination"]
    );
    ensure!(
        std::fs::read_to_string(out1.join("report.txt")).unwrap() == "Scripted findings.\n",
        "report text"
    );

    // prompt capture in-process, with one distinct snippet per entry
    let mut entries = Vec::new();
    for p in index.pathologies() {
        for e in index.entries(p).unwrap() {
            entries.push(ReferenceEntry {
                snippet: format!("Reference {} #{}: {}", p, e.entry_id, e.snippet),
                ..e.clone()
            });
        }
    }
    let unique = Index::build(entries).unwrap();
    for k in [1, 2, 3] {
        let backend = ScriptedBackend::new(
            (0..calls_per_step * reg.tools.len())
                .map(|_| Fixture::new("*", "no json here"))
                .chain([Fixture::new("*", "Final.")])
                .collect(),
        );
        let cfg = RunConfig {
            k,
            parse_retries: calls_per_step - 1,
            ..RunConfig::default()
        };
        let outcome = Agent::new(&reg, &unique, &backend, &cfg)
            .run(&study, DEFAULT_QUERY, None)
            .map_err(|e| e.to_string())?;
        let items = outcome.evidence.items();
        ensure!(
            items.len() == reg.tools.len(),
            "k={k}: {} evidence items",
            items.len()
        );
        for (i, item) in items.iter().enumerate() {
            ensure!(item.step == i + 1, "k={k}: evidence step {}", item.step);
            ensure!(
                item.pathology_id == reg.tools[i].pathology_id,
                "k={k}: item {i} is {}",
                item.pathology_id
            );
            let want = k.min(unique.partition_len(&item.pathology_id).unwrap());
            ensure!(
                item.neighbors.len() == want,
                "k={k}: item {i} has {} neighbors",
                item.neighbors.len()
            );
        }
        let requests = backend.requests();
        let voxels: usize = study.volume.dims().iter().product();
        for r in &requests {
            let text = r.joined_content();
            ensure!(text.len() < voxels, "prompt of {} chars", text.len());
            if let Some(l) = text.lines().find(|l| numeric_tokens(l) > 3) {
                return Err(format!("numeric run in prompt line: {l}"));
            }
        }
        let synthesis = requests.last().unwrap().joined_content();
        for item in items {
            for n in &item.neighbors.neighbors {
                ensure!(
                    synthesis.contains(&n.snippet),
                    "snippet missing from synthesis prompt: {}",
                    n.snippet
                );
            }
        }
        // each step's snippets reach the next decision prompt
        for (i, item) in items.iter().enumerate().take(items.len() - 1) {
            let next = requests[(i + 1) * calls_per_step].joined_content();
            for n in &item.neighbors.neighbors {
                ensure!(
                    next.contains(&n.snippet),
                    "k={k}: step {} snippet missing from next decision prompt",
                    i + 1
                );
            }
        }
    }
    Ok(())
}

// ---- 5: cohort

fn gold(f: Findings) -> GoldLabels {
    let mut labels = LabelSet::none();
    labels.set("PleuralEffusion", f.effusion.is_some()).unwrap();
    labels.set("PericardialEffusion", f.pericardial).unwrap();
    labels
        .set("ArterialWallCalcification", f.calcified)
        .unwrap();
    GoldLabels {
        labels,
        laterality: f.effusion,
    }
}

fn cohort_fidelity() -> Check {
    let start = Instant::now();
    let reg = ToolRegistry::default_registry();
    let index = reference_index(&reg);
    let f = |effusion, pericardial, calcified| Findings {
        effusion,
        pericardial,
        calcified,
    };
    let plan = [
        f(Some(Laterality::Left), true, true),
        f(Some(Laterality::Right), false, true),
        f(None, true, false),
        f(Some(Laterality::Left), false, false),
        f(Some(Laterality::Right), true, true),
        f(None, false, false),
    ];
    let cfg = RunConfig::default();
    let backend = EchoBackend;
    let mut cases = Vec::new();
    for (i, findings) in plan.iter().enumerate() {
        let study = chest(&format!("case-{i}"), *findings);
        let outcome = Agent::new(&reg, &index, &backend, &cfg)
            .run(&study, DEFAULT_QUERY, None)
            .map_err(|e| e.to_string())?;
        cases.push(CaseInput {
            study_id: study.study_id.clone(),
            generated: outcome.report,
            reference: "Reference report.".into(),
            gold: gold(*findings),
        });
    }
    let lexicon = Lexicon::default_lexicon();
    let classifier = LexiconClassifier::new(lexicon.clone());
    let result = evaluate_cohort(&cases, &classifier, &lexicon, Default::default())
        .map_err(|e| e.to_string())?;
    let planted = [
        "PleuralEffusion",
        "PericardialEffusion",
        "ArterialWallCalcification",
    ];
    let macro_f1 = result
        .metrics
        .macro_f1_over(&planted)
        .map_err(|e| e.to_string())?;
    ensure!(
        macro_f1 == 1.0,
        "planted macro F1 {macro_f1}; reports: {:?}",
        cases.iter().map(|c| &c.generated).collect::<Vec<_>>()
    );
    ensure!(
        result.metrics.laterality_f1 == Some(1.0),
        "laterality F1 {:?}",
        result.metrics.laterality_f1
    );
    for c in &result.cases {
        let extra: Vec<_> = c
            .predicted
            .positives()
            .filter(|p| !planted.contains(p))
            .collect();
        ensure!(
            extra.is_empty(),
            "{}: unplanted positives {extra:?}",
            c.study_id
        );
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < COHORT_LIMIT, "took {elapsed:?}");
    Ok(())
}

// ---- 6: metrics

fn metric_correctness() -> Check {
    let near = |a: f64, b: f64| (a - b).abs() < METRIC_TOL;
    let text = "Mild left pleural effusion. Heart size is normal.";
    ensure!(
        bleu1(text, text) == 1.0,
        "bleu1 identity {}",
        bleu1(text, text)
    );
    ensure!(
        rouge_l(text, text) == 1.0,
        "rouge_l identity {}",
        rouge_l(text, text)
    );
    let b = bleu1("a a a", "a b");
    ensure!(near(b, 1.0 / 3.0), "bleu1 clipped case {b}");
    let r = rouge_l("the cat sat", "the cat on the mat sat");
    ensure!(near(r, 2.0 / 3.0), "rouge_l case {r}");
    let m = meteor_exact("b a", "a b");
    ensure!(near(m, 0.5), "meteor penalty case {m}");

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let random_set = |rng: &mut ChaCha8Rng, p: f64| {
        let mut a = [false; PATHOLOGY_COUNT];
        a.iter_mut().for_each(|v| *v = rng.gen_bool(p));
        LabelSet::from_array(a)
    };
    for round in 0..20 {
        let n = if round == 0 {
            1000
        } else {
            rng.gen_range(1..200)
        };
        let p = rng.gen_range(0.02..0.5);
        let pred: Vec<LabelSet> = (0..n).map(|_| random_set(&mut rng, p)).collect();
        let gold: Vec<LabelSet> = (0..n).map(|_| random_set(&mut rng, p)).collect();
        let got = prf1(&pred, &gold).map_err(|e| e.to_string())?;
        let mut f1_sum = 0.0;
        for (j, (id, _)) in PATHOLOGIES.iter().enumerate() {
            let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
            for (a, b) in pred.iter().zip(&gold) {
                match (a.as_array()[j], b.as_array()[j]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let prec = if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let rec = if tp + fn_ == 0 {
                0.0
            } else {
                tp as f64 / (tp + fn_) as f64
            };
            let f1 = if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            let s: &Prf1 = got.get(id).ok_or(format!("no scores for {id}"))?;
            ensure!(
                near(s.precision, prec) && near(s.recall, rec) && near(s.f1, f1),
                "round {round} {id}: {s:?} vs ({prec}, {rec}, {f1})"
            );
            f1_sum += f1;
        }
        ensure!(
            near(got.macro_f1, f1_sum / PATHOLOGY_COUNT as f64),
            "round {round}: macro F1 {}",
            got.macro_f1
        );
    }
    Ok(())
}

// ---- 7: published arithmetic

fn published_arithmetic() -> Check {
    let r = SensitivityReport::from_scalars(0.323, 0.234, 0.312, 0.230);
    ensure!(
        format!("{:.3}", r.delta_all) == "-0.089",
        "delta all {}",
        r.delta_all
    );
    ensure!(
        format!("{:.3}", r.delta_lung) == "-0.082",
        "delta lung {}",
        r.delta_lung
    );
    ensure!(
        (r.delta_all + 0.089).abs() < 1e-12,
        "delta all {}",
        r.delta_all
    );
    ensure!(
        (r.delta_lung + 0.082).abs() < 1e-12,
        "delta lung {}",
        r.delta_lung
    );

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let volumes = |rng: &mut ChaCha8Rng, n: usize| -> BTreeMap<String, f64> {
        (0..n)
            .map(|i| (format!("study-{i:05}"), rng.gen_range(2.0e6..8.0e6)))
            .collect()
    };
    let v = volumes(&mut rng, 2590);
    let flagged = oversegmentation_flag(&v, 0.10).map_err(|e| e.to_string())?;
    ensure!(flagged.len() == 259, "{} of 2590 flagged", flagged.len());
    let threshold = flagged.iter().map(|id| v[id]).fold(f64::INFINITY, f64::min);
    ensure!(
        v.iter()
            .filter(|(id, _)| !flagged.contains(*id))
            .all(|(_, &x)| x <= threshold),
        "an unflagged study is larger than a flagged one"
    );
    for _ in 0..200 {
        let n = rng.gen_range(1..5000);
        let got = oversegmentation_flag(&volumes(&mut rng, n), 0.10)
            .unwrap()
            .len();
        ensure!(got == n.div_ceil(10), "n={n}: {got} flagged");
    }
    Ok(())
}

// ---- 8: snippets

fn snippet_pipeline() -> Check {
    ensure!(
        canonical_negative("Pleural effusion")
            == "No sign of Pleural effusion was found in the scan.",
        "canonical negative {:?}",
        canonical_negative("Pleural effusion")
    );
    let set = ExtractionPromptSet::sample();
    let msgs = build_extraction_prompt(&set, "Aortic wall calcification is seen.");
    let all: String = msgs
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    ensure!(
        all.contains("precise radiology report information extractor"),
        "anchor phrase missing"
    );
    ensure!(
        msgs.last().unwrap().content.ends_with("Extraction:"),
        "prompt does not end with Extraction:"
    );
    ensure!(
        all.contains("Aortic wall calcification is seen."),
        "report text missing from prompt"
    );

    let neg = set.canonical_negative();
    let replies = [
        ("r1", "Calcification of the aortic wall.", true),
        ("r2", "Calcified plaques in the aorta.", true),
        ("r3", "Aortic calcification.", false),
        ("r4", neg.as_str(), true),
        ("r5", neg.as_str(), false),
        ("r6", neg.as_str(), false),
        ("r7", "  Atherosclerotic aorta.  ", true),
    ];
    let snippets: Vec<ExtractedSnippet> = replies
        .iter()
        .map(|(id, t, _)| ExtractedSnippet::new(id, &set, t))
        .collect();
    let labels: BTreeMap<String, bool> = replies
        .iter()
        .map(|(id, _, g)| (id.to_string(), *g))
        .collect();
    let v = template_f1_verify(&snippets, &labels).map_err(|e| e.to_string())?;
    let v = &v[&set.pathology_id];
    // hand count: tp r1 r2 r7, fp r3, fn r4, tn r5 r6
    ensure!(
        (v.tp, v.fp, v.fn_, v.tn) == (3, 1, 1, 2),
        "counts {:?}",
        (v.tp, v.fp, v.fn_, v.tn)
    );
    ensure!(
        v.scores.precision == 0.75 && v.scores.recall == 0.75 && v.scores.f1 == 0.75,
        "scores {:?}",
        v.scores
    );
    ensure!(
        snippets[6].text == "Atherosclerotic aorta.",
        "snippet not trimmed"
    );

    let all_neg: Vec<ExtractedSnippet> = (0..3)
        .map(|i| ExtractedSnippet::new(&format!("n{i}"), &set, &neg))
        .collect();
    let labels: BTreeMap<String, bool> = (0..3).map(|i| (format!("n{i}"), false)).collect();
    let v = template_f1_verify(&all_neg, &labels).map_err(|e| e.to_string())?;
    let v = &v[&set.pathology_id];
    ensure!(
        (v.tp, v.fp, v.fn_, v.tn) == (0, 0, 0, 3) && v.no_positives && v.scores.f1 == 0.0,
        "all-negative counts {v:?}"
    );
    Ok(())
}

// ---- 9: file formats

fn format_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..100 {
        let dims = [
            rng.gen_range(1..12),
            rng.gen_range(1..12),
            rng.gen_range(1..12),
        ];
        let spacing = [
            rng.gen_range(0.1..5.0),
            rng.gen_range(0.1..5.0),
            rng.gen_range(0.1..5.0),
        ];
        let n: usize = dims.iter().product();
        let vol = Volume::new(
            dims,
            spacing,
            (0..n).map(|_| rng.gen_range(-1024..=3071)).collect(),
        )
        .unwrap();
        let mut buf = Vec::new();
        let written = save_volume(&vol, &mut buf).unwrap();
        ensure!(
            written as usize == buf.len() && buf.len() == 48 + 2 * n,
            "case {case}: volume size {written}"
        );
        ensure!(
            load_volume(&buf[..]).map_err(|e| e.to_string())? == vol,
            "case {case}: volume round trip"
        );

        let mask = random_mask(&mut rng, dims, spacing);
        let mut mbuf = Vec::new();
        save_mask(&mask, &mut mbuf).unwrap();
        ensure!(
            mbuf.len() == 48 + n,
            "case {case}: mask size {}",
            mbuf.len()
        );
        ensure!(
            load_mask(&mbuf[..], "m").map_err(|e| e.to_string())? == mask,
            "case {case}: mask round trip"
        );

        let d = rng.gen_range(1..8);
        let parts = rng.gen_range(1..4);
        let mut entries = Vec::new();
        for (p, pathology) in PATHOLOGIES.iter().take(parts).enumerate() {
            let size = rng.gen_range(1..30);
            let mut part = random_partition(&mut rng, pathology.0, size, d);
            for e in &mut part {
                e.entry_id += 10_000 * p as u64;
                e.snippet = format!("Finding \"{}\" with unicode \u{b0} and\ttab", e.entry_id);
            }
            entries.extend(part);
        }
        let index = Index::build(entries.clone()).map_err(|e| e.to_string())?;
        let mut ibuf = Vec::new();
        index.save(&mut ibuf).unwrap();
        let loaded = Index::load(&ibuf[..]).map_err(|e| e.to_string())?;
        let mut again = Vec::new();
        loaded.save(&mut again).unwrap();
        ensure!(
            ibuf == again,
            "case {case}: index bytes changed after reload"
        );
        for e in entries.iter().take(5) {
            for k in [1, 3, 13] {
                let a = index.knn_query(&e.pathology_id, &e.features, k).unwrap();
                let b = loaded.knn_query(&e.pathology_id, &e.features, k).unwrap();
                ensure!(a == b, "case {case}: reloaded index answers differently");
            }
        }
    }

    let vol = Volume::filled([2, 2, 2], [1.0, 1.0, 1.0], 0).unwrap();
    let mut good = Vec::new();
    save_volume(&vol, &mut good).unwrap();
    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"XVOL");
    ensure!(
        matches!(load_volume(&bad[..]), Err(VolumeError::BadMagic { .. })),
        "bad magic not reported"
    );
    ensure!(
        matches!(
            load_volume(&good[..good.len() - 1]),
            Err(VolumeError::PayloadLength { .. })
        ),
        "truncation not reported"
    );
    let mut bad = good.clone();
    bad[4..8].copy_from_slice(&2u32.to_le_bytes());
    ensure!(
        matches!(
            load_volume(&bad[..]),
            Err(VolumeError::UnsupportedVersion(2))
        ),
        "version not reported"
    );
    let mut bad = good.clone();
    bad[20..28].copy_from_slice(&0f64.to_le_bytes());
    ensure!(
        matches!(
            load_volume(&bad[..]),
            Err(VolumeError::NonPositiveSpacing(_))
        ),
        "spacing not reported"
    );
    ensure!(
        matches!(load_mask(&good[..], "m"), Err(VolumeError::BadMagic { .. })),
        "volume read as mask"
    );
    let mask = Mask::empty("m", [4, 4, 4], [1.0, 1.0, 1.0]).unwrap();
    let mut mbuf = Vec::new();
    ensure!(
        save_mask(&mask, &mut mbuf).unwrap() == 48 + 64,
        "mask byte count"
    );
    mbuf[60] = 2;
    ensure!(
        matches!(
            load_mask(&mbuf[..], "m"),
            Err(VolumeError::InvalidMaskValue { value: 2, .. })
        ),
        "mask value 2 not reported"
    );

    let reg = ToolRegistry::default_registry();
    let index = reference_index(&reg);
    let mut ibuf = Vec::new();
    index.save(&mut ibuf).unwrap();
    let text = String::from_utf8(ibuf).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut entry: Value = serde_json::from_str(&lines[2]).unwrap();
    entry.as_object_mut().unwrap().remove("snippet");
    lines[2] = entry.to_string();
    match Index::load(lines.join("\n").as_bytes()) {
        Err(RetrievalError::Parse { line: 3, message }) if message.contains("snippet") => {}
        other => return Err(format!("missing snippet gave {:?}", other.map(|_| ()))),
    }
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut stats: Value = serde_json::from_str(&lines[0]).unwrap();
    stats["partitions"]
        .as_object_mut()
        .unwrap()
        .remove("PleuralEffusion");
    lines[0] = stats.to_string();
    ensure!(
        matches!(
            Index::load(lines.join("\n").as_bytes()),
            Err(RetrievalError::PartitionMismatch(_))
        ),
        "stats/entry mismatch not reported"
    );

    let dir = tempfile::tempdir().unwrap();
    let study = chest(
        "rt",
        Findings {
            effusion: Some(Laterality::Bilateral),
            pericardial: true,
            calcified: true,
        },
    );
    save_study(&study, dir.path()).unwrap();
    ensure!(
        load_study(dir.path()).map_err(|e| e.to_string())? == study,
        "study round trip"
    );
    Ok(())
}
