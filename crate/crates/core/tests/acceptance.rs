//! Acceptance checks, one line per criterion. Runs fully offline against the
//! mock tool suite.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scenecraft::analysis::{self, Category, SpatialRelation};
use scenecraft::engine::suite::{run_suite, SuiteOptions};
use scenecraft::engine::{Engine, EngineConfig, PipelineSession, SessionOptions};
use scenecraft::eval::{self, Detection, SuitePrompt, AP_THRESHOLDS};
use scenecraft::guidance::{attention_bias_for, average_embeddings, EmbeddingVector, GuidanceConfig};
use scenecraft::layout::{self, spatial_holds, BBox, Canvas, LayoutConfig, LayoutEntry, SceneLayout};
use scenecraft::policy::{self, Phase, PolicyConfig, SessionState};
use scenecraft::tools::mock::{render_layout, FaultInjector};
use scenecraft::vocab::Lexicon;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn engine(dir: &tempfile::TempDir, f: impl FnOnce(&mut EngineConfig)) -> Engine {
    let mut cfg = EngineConfig { storage_root: dir.path().join("sessions"), ..EngineConfig::default() };
    f(&mut cfg);
    Engine::new(cfg).expect("engine")
}

// ---------------------------------------------------------------------------

/// The five printed answers, transcribed box for box.
const PRINTED: [(&str, &[(&str, [u32; 4])]); 5] = [
    ("attribute-only", &[("a blue horse", [50, 70, 220, 300]), ("a brown vase", [300, 113, 150, 250])]),
    ("attribute-only", &[("a fabric rug", [20, 200, 470, 150]), ("a leather belt", [100, 250, 300, 20])]),
    (
        "relationship-only",
        &[("a cat", [120, 150, 300, 300]), ("a collar", [120, 300, 300, 50]), ("a bell", [250, 320, 110, 100])],
    ),
    ("both", &[("a rectangular mirror", [170, 80, 172, 100]), ("a white sink", [150, 200, 212, 150])]),
    ("relationship-only", &[("a red apple", [235, 230, 60, 60]), ("a plate", [175, 210, 180, 180])]),
];

fn appendix_fidelity() -> Check {
    let start = Instant::now();
    let examples = analysis::default_examples();
    ensure(examples.len() == 5, || format!("{} in-context examples", examples.len()))?;
    for (i, (ex, (label, boxes))) in examples.iter().zip(PRINTED).enumerate() {
        let parsed = analysis::parse_agent_response(&ex.answer, Canvas::default()).map_err(|e| format!("A{}: {e}", i + 1))?;
        ensure(parsed.analysis.category.label() == label, || format!("A{}: category {}", i + 1, parsed.analysis.category))?;
        let got: Vec<(String, [u32; 4])> = parsed
            .layout
            .entries
            .iter()
            .map(|e| (e.caption.clone(), [e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h]))
            .collect();
        let want: Vec<(String, [u32; 4])> = boxes.iter().map(|(c, b)| ((*c).to_string(), *b)).collect();
        ensure(got == want, || format!("A{}: {got:?}", i + 1))?;
        let text = analysis::format_answer(parsed.analysis.category, &parsed.layout);
        let again = analysis::parse_agent_response(&text, Canvas::default()).map_err(|e| format!("A{} reparse: {e}", i + 1))?;
        ensure(again.layout == parsed.layout && again.analysis.category == parsed.analysis.category, || {
            format!("A{}: round trip changed the answer", i + 1)
        })?;
        ensure(analysis::format_answer(again.analysis.category, &again.layout) == text, || format!("A{}: text not stable", i + 1))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("5/5 answers exact, round trips identical, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------

const GOLDEN: [(&str, Category); 40] = [
    ("a blue horse and a brown vase", Category::AttributeOnly),
    ("a red car and a yellow bus", Category::AttributeOnly),
    ("a green apple and a purple grape", Category::AttributeOnly),
    ("a wooden chair and a metal table", Category::AttributeOnly),
    ("a round clock and a square mirror", Category::AttributeOnly),
    ("a black cat on the left of a white dog", Category::AttributeOnly),
    ("a pink flower next to a blue vase", Category::AttributeOnly),
    ("an orange ball and a green box", Category::AttributeOnly),
    ("a silver spoon on the right of a golden cup", Category::AttributeOnly),
    ("a fabric rug and a leather belt", Category::AttributeOnly),
    ("a cat above a dog", Category::RelationOnly),
    ("a lamp below a shelf", Category::RelationOnly),
    ("the apple on top of the plate", Category::RelationOnly),
    ("a cat holding a ball", Category::RelationOnly),
    ("a dog chasing a cat", Category::RelationOnly),
    ("a bird above a tree", Category::RelationOnly),
    ("a book on top of a table", Category::RelationOnly),
    ("a man riding a horse", Category::RelationOnly),
    ("a girl holding an umbrella", Category::RelationOnly),
    ("a boat below a bridge", Category::RelationOnly),
    ("a blue bowl on top of a white placemat", Category::Both),
    ("a red bird above a green tree", Category::Both),
    ("a black dog chasing a white cat", Category::Both),
    ("a yellow book on top of a wooden table", Category::Both),
    ("a pink cup above a green box", Category::Both),
    ("a wooden boat below a stone bridge", Category::Both),
    ("a red ball on top of a blue box", Category::Both),
    ("a purple car below a yellow sign", Category::Both),
    ("a girl holding a red umbrella", Category::Both),
    ("a brown horse below a blue kite", Category::Both),
    ("a cat", Category::Simple),
    ("a dog and a cat", Category::Simple),
    ("a cat on the left of a dog", Category::Simple),
    ("a tree next to a house", Category::Simple),
    ("a car on the right of a bus", Category::Simple),
    ("two dogs", Category::Simple),
    ("a horse and a cow", Category::Simple),
    ("three apples", Category::Simple),
    ("a bird", Category::Simple),
    ("a lamp next to a bed", Category::Simple),
];

/// The four branches written out step by step.
fn expected_shape(category: Category) -> Vec<&'static str> {
    match category {
        Category::AttributeOnly => vec!["generate_concept_images", "customize", "verify"],
        Category::RelationOnly => vec!["layout_to_image", "verify"],
        Category::Both => vec!["generate_concept_images", "layout_to_image", "verify"],
        Category::Simple => vec!["text_to_image"],
    }
}

fn policy_golden_table() -> Check {
    let lex = Lexicon::default();
    let mut per = [0usize; 4];
    let mut misses = Vec::new();
    for (prompt, label) in GOLDEN {
        per[Category::ALL.iter().position(|c| *c == label).unwrap()] += 1;
        let a = analysis::decompose_rule_based(prompt, &lex).map_err(|e| format!("{prompt}: {e}"))?;
        let plan = policy::make_plan(&a, &PolicyConfig::default());
        if plan.shape() != expected_shape(label) {
            misses.push(format!("{prompt:?} -> {:?} ({})", plan.shape(), a.category));
        }
    }
    ensure(per == [10; 4], || format!("suite is unbalanced: {per:?}"))?;
    ensure(misses.is_empty(), || format!("{} mismatches: {}", misses.len(), misses.join("; ")))?;
    Ok("40/40 plans match (10 per category)".into())
}

// ---------------------------------------------------------------------------

fn four_attribute_prompts() -> Vec<SuitePrompt> {
    let colors = ["blue", "red", "green", "yellow", "purple", "orange", "pink", "white", "black", "brown"];
    let second = ["wooden", "oval", "metallic", "round", "square", "triangular", "fabric", "leather"];
    let nouns = ["horse", "vase", "car", "clock", "chair", "box", "cup", "hat", "lamp", "kite", "bag"];
    (0..50)
        .map(|i| {
            let (c1, c2) = (colors[i % colors.len()], colors[(i * 3 + 1) % colors.len()]);
            let c2 = if c2 == c1 { colors[(i * 3 + 2) % colors.len()] } else { c2 };
            let (s1, s2) = (second[i % second.len()], second[(i / 2 + 3) % second.len()]);
            let (n1, n2) = (nouns[i % nouns.len()], nouns[(i * 7 + 5) % nouns.len()]);
            let n2 = if n2 == n1 { nouns[(i * 7 + 6) % nouns.len()] } else { n2 };
            let article = |w: &str| if w.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" };
            SuitePrompt { prompt: format!("{} {c1} {s1} {n1} and {} {c2} {s2} {n2}", article(c1), article(c2)), category: None }
        })
        .collect()
}

fn closed_loop() -> Check {
    let start = Instant::now();
    let prompts = four_attribute_prompts();
    let lex = Lexicon::default();
    for p in &prompts {
        let a = analysis::decompose_rule_based(&p.prompt, &lex).map_err(|e| format!("{}: {e}", p.prompt))?;
        let n: usize = a.objects.iter().map(|o| o.attributes.len()).sum();
        ensure(n == 4, || format!("{:?} has {n} attributes", p.prompt))?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let e = engine(&dir, |_| {});
    let on = run_suite(&e, &prompts, &SuiteOptions { inject_color_fault: true, ..Default::default() }, None)
        .map_err(|e| e.to_string())?;
    ensure(on.failed == 0, || format!("{} prompts failed", on.failed))?;
    let not_done: Vec<_> = on.rows.iter().filter(|r| r.phase != "done").map(|r| r.prompt.clone()).collect();
    ensure(not_done.is_empty(), || format!("not done: {not_done:?}"))?;
    let max_rounds = on.rows.iter().map(|r| r.edit_rounds).max().unwrap_or(0);
    ensure(max_rounds <= 2, || format!("{max_rounds} edit rounds"))?;
    ensure(on.attribute_accuracy == 1.0, || format!("accuracy with correction {}", on.attribute_accuracy))?;
    let off = run_suite(
        &e,
        &prompts,
        &SuiteOptions { inject_color_fault: true, self_correction: Some(false), ..Default::default() },
        None,
    )
    .map_err(|e| e.to_string())?;
    ensure(off.failed == 0, || format!("{} prompts failed without correction", off.failed))?;
    ensure((off.attribute_accuracy - 0.75).abs() <= 0.05, || format!("accuracy without correction {}", off.attribute_accuracy))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "with correction {:.4} (max {max_rounds} round), without {:.4}, {elapsed:.1?}",
        on.attribute_accuracy, off.attribute_accuracy
    ))
}

// ---------------------------------------------------------------------------

fn guidance_math() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let canvas = Canvas::default();
    let mut grids = 0;
    for ds in [8u32, 4, 2] {
        let cfg = GuidanceConfig { latent_downsample: ds, ..GuidanceConfig::default() };
        let (gw, gh) = cfg.grid_for(canvas).map_err(|e| e.to_string())?;
        for _ in 0..200 {
            let w = rng.random_range(1..=512u32);
            let h = rng.random_range(1..=512u32);
            let b = BBox::new(rng.random_range(0..=512 - w), rng.random_range(0..=512 - h), w, h);
            let fg = match attention_bias_for(&b, canvas, &cfg, &[(0, 3)]) {
                Ok(bias) => {
                    ensure(bias.cells.iter().all(|v| *v == 2.5 || *v == -10000.0), || format!("stray value in {b}"))?;
                    bias.foreground_count() as f64
                }
                Err(scenecraft::Error::ZeroAreaAtResolution { .. }) => 0.0,
                Err(e) => return Err(e.to_string()),
            };
            // Box measured in cells of the grid.
            let (wc, hc) = (f64::from(w) / f64::from(ds), f64::from(h) / f64::from(ds));
            let area = wc * hc;
            let perimeter = 2.0 * (wc + hc);
            let err = (fg - area).abs() / area;
            ensure(err <= 2.0 * perimeter / area, || format!("{gw}x{gh}: {b} error {err} over bound"))?;
            grids += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=24usize);
        let dim = rng.random_range(1..=16usize);
        let sets: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let vectors: Vec<EmbeddingVector> =
            sets.iter().map(|v| EmbeddingVector::new(v.clone())).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let got = average_embeddings(&vectors).map_err(|e| e.to_string())?;
        for d in 0..dim {
            let mut sum = 0.0;
            for v in &sets {
                sum += v[d];
            }
            worst = worst.max((got.values[d] - sum / n as f64).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("embedding mean off by {worst:e}"))?;
    Ok(format!("{grids} bias grids two-valued and within bound; 1000 means within {worst:.1e}"))
}

// ---------------------------------------------------------------------------

const LAYOUT_PROMPTS: [&str; 10] = [
    "a cat above a dog",
    "the red apple on top of the plate",
    "a lamp next to a bed",
    "a cat on the left of a dog",
    "three yellow bananas on top of a wooden table",
    "a blue horse and a brown vase",
    "two dogs below a bird",
    "a car on the right of a bus and a tree",
    "a book on top of a table next to a chair",
    "four apples",
];

fn layout_engine() -> Check {
    let lex = Lexicon::default();
    let cfg = LayoutConfig::default();
    let analyses: Vec<_> =
        LAYOUT_PROMPTS.iter().map(|p| analysis::decompose_rule_based(p, &lex).map_err(|e| format!("{p}: {e}"))).collect::<Result<_, _>>()?;
    let mut satisfied = 0;
    let mut total = 0;
    for seed in 0..1000u64 {
        let a = &analyses[seed as usize % analyses.len()];
        let l = layout::plan_layout(a, Canvas::default(), &cfg, seed).map_err(|e| format!("seed {seed} {:?}: {e}", a.raw_prompt))?;
        let report = layout::validate(&l, &cfg);
        ensure(report.is_clean(), || format!("seed {seed} {:?}: {:?}", a.raw_prompt, report.violations))?;
        ensure(l.entries.len() == a.instance_count(), || format!("seed {seed}: wrong box count"))?;
        for r in &a.relations {
            total += 1;
            satisfied += usize::from(layout::relation_satisfied(&l, r, &cfg));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut pairs = 0;
    for _ in 0..10_000 {
        let mut b = || BBox::new(rng.random_range(0..400), rng.random_range(0..400), rng.random_range(1..200), rng.random_range(1..200));
        let (p, q) = (b(), b());
        let l = spatial_holds(SpatialRelation::Left, &p, &q, &cfg);
        ensure(l == spatial_holds(SpatialRelation::Right, &q, &p, &cfg), || format!("left({p},{q}) != right({q},{p})"))?;
        ensure(!(l && spatial_holds(SpatialRelation::Left, &q, &p, &cfg)), || format!("left both ways for {p}, {q}"))?;
        pairs += 1;
    }
    let apple = BBox::new(235, 230, 60, 60);
    let plate = BBox::new(175, 210, 180, 180);
    ensure(spatial_holds(SpatialRelation::OnTop, &apple, &plate, &cfg), || "A5 apple is not on top of the plate".into())?;
    Ok(format!("1000 layouts clean ({satisfied}/{total} relations hold), {pairs} pairs antisymmetric, A5 on_top holds"))
}

// ---------------------------------------------------------------------------

fn pixel_counts(a: &BBox, b: &BBox) -> (u64, u64) {
    let (mut inter, mut union) = (0, 0);
    for y in 0..96 {
        for x in 0..96 {
            let ia = x >= a.x && x < a.x + a.w && y >= a.y && y < a.y + a.h;
            let ib = x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h;
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    (inter, union)
}

/// AP by brute force: every detection in rank order scans every ground-truth
/// box, IoU is compared through pixel counts, and the area is accumulated as
/// the interpolated precision at each true positive.
fn oracle_ap(images: &[(Vec<Detection>, Vec<(String, BBox)>)], t_pct: u64) -> f64 {
    let npos: usize = images.iter().map(|(_, g)| g.len()).sum();
    if npos == 0 {
        return 0.0;
    }
    let mut ranked = Vec::new();
    for (i, (dets, _)) in images.iter().enumerate() {
        for (k, d) in dets.iter().enumerate() {
            ranked.push((i, k, d));
        }
    }
    ranked.sort_by(|a, b| b.2.score.partial_cmp(&a.2.score).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut taken: Vec<Vec<bool>> = images.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let mut hits = Vec::new();
    for (img, _, d) in &ranked {
        let mut best: Option<(usize, u64, u64)> = None;
        for (j, (label, g)) in images[*img].1.iter().enumerate() {
            if taken[*img][j] || *label != d.label {
                continue;
            }
            let (i, u) = pixel_counts(&d.bbox, g);
            if u == 0 || 100 * i < t_pct * u {
                continue;
            }
            if best.is_none_or(|(_, bi, bu)| i * bu > bi * u) {
                best = Some((j, i, u));
            }
        }
        if let Some((j, _, _)) = best {
            taken[*img][j] = true;
        }
        hits.push(best.is_some());
    }
    let precision: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|h| **h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut area = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let best_after = precision[k..].iter().cloned().fold(0.0, f64::max);
            area += best_after / npos as f64;
        }
    }
    area
}

fn ap_cases() -> Vec<Vec<(Vec<Detection>, Vec<(String, BBox)>)>> {
    let d = |l: &str, b: [u32; 4], s: f64| Detection { label: l.into(), bbox: BBox::new(b[0], b[1], b[2], b[3]), score: s };
    let g = |l: &str, b: [u32; 4]| (l.to_string(), BBox::new(b[0], b[1], b[2], b[3]));
    let mut cases = vec![
        vec![(vec![d("cat", [0, 0, 40, 40], 0.9)], vec![g("cat", [0, 0, 40, 40])])],
        vec![(vec![d("cat", [10, 0, 40, 40], 0.9)], vec![g("cat", [0, 0, 40, 40])])],
        vec![(vec![], vec![g("cat", [0, 0, 40, 40])])],
        vec![(vec![d("cat", [0, 0, 40, 40], 0.9)], vec![])],
        vec![(vec![d("dog", [0, 0, 40, 40], 0.9)], vec![g("cat", [0, 0, 40, 40])])],
        vec![(
            vec![d("cat", [0, 0, 40, 40], 0.9), d("cat", [0, 0, 40, 40], 0.8)],
            vec![g("cat", [0, 0, 40, 40])],
        )],
        vec![(
            vec![d("cat", [50, 50, 30, 30], 0.95), d("cat", [0, 0, 40, 40], 0.5)],
            vec![g("cat", [0, 0, 40, 40]), g("cat", [60, 0, 30, 30])],
        )],
        vec![
            (vec![d("cat", [0, 0, 40, 40], 0.7)], vec![g("cat", [0, 0, 40, 40])]),
            (vec![d("cat", [5, 5, 40, 40], 0.9), d("dog", [50, 50, 20, 20], 0.3)], vec![g("cat", [0, 0, 40, 40]), g("dog", [50, 52, 20, 20])]),
        ],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let labels = ["cat", "dog"];
    while cases.len() < 20 {
        let mut images = Vec::new();
        for _ in 0..rng.random_range(1..=2) {
            let rb = |rng: &mut ChaCha8Rng| {
                [rng.random_range(0..50), rng.random_range(0..50), rng.random_range(4..40), rng.random_range(4..40)]
            };
            let gts: Vec<_> = (0..rng.random_range(0..4)).map(|_| g(labels[rng.random_range(0..2)], rb(&mut rng))).collect();
            let mut dets = Vec::new();
            for _ in 0..rng.random_range(0..5) {
                let b = if !gts.is_empty() && rng.random_bool(0.6) {
                    let base = gts[rng.random_range(0..gts.len())].1;
                    [base.x + rng.random_range(0..6), base.y + rng.random_range(0..6), base.w, base.h]
                } else {
                    rb(&mut rng)
                };
                dets.push(d(labels[rng.random_range(0..2)], b, f64::from(rng.random_range(1..100u32)) / 100.0));
            }
            images.push((dets, gts));
        }
        cases.push(images);
    }
    cases
}

fn detector_ap50() -> Result<f64, String> {
    let prompts = [
        "a blue horse and a brown vase",
        "a red car on the left of a yellow bus",
        "a cat above a dog",
        "the green apple on top of the white plate",
        "two purple cups and an orange ball",
        "a lamp next to a bed",
        "three pink flowers",
        "a black chair on the right of a silver table",
    ];
    let lex = Lexicon::default();
    let mut pairs: Vec<(Vec<Detection>, SceneLayout)> = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        let a = analysis::decompose_rule_based(p, &lex).map_err(|e| e.to_string())?;
        for seed in 0..3u64 {
            let l = layout::plan_layout(&a, Canvas::default(), &LayoutConfig::default(), seed * 100 + i as u64).map_err(|e| e.to_string())?;
            let (img, _) = render_layout(&l, &FaultInjector::none());
            pairs.push((eval::detect_rectangles(&img, &eval::color_vocabulary(&l)), l));
        }
    }
    let refs: Vec<(&[Detection], &SceneLayout)> = pairs.iter().map(|(d, l)| (d.as_slice(), l)).collect();
    Ok(eval::average_precision_multi(&refs).ap50)
}

fn eval_harness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..10_000 {
        let mut b = || BBox::new(rng.random_range(0..48), rng.random_range(0..48), rng.random_range(1..48), rng.random_range(1..48));
        let (p, q) = (b(), b());
        let oracle = pixel_counts(&p, &q);
        ensure(eval::iou_exact(&p, &q) == oracle, || format!("{p} vs {q}: {:?} != {oracle:?}", eval::iou_exact(&p, &q)))?;
        ensure(eval::iou(&p, &q) == oracle.0 as f64 / oracle.1 as f64, || format!("{p} vs {q}: float iou"))?;
    }
    let cases = ap_cases();
    for (n, images) in cases.iter().enumerate() {
        let layouts: Vec<SceneLayout> = images
            .iter()
            .map(|(_, gts)| SceneLayout {
                canvas: Canvas::default(),
                entries: gts
                    .iter()
                    .enumerate()
                    .map(|(i, (l, b))| LayoutEntry { object_ref: i, instance: 0, caption: format!("a {l}"), bbox: *b })
                    .collect(),
            })
            .collect();
        let refs: Vec<(&[Detection], &SceneLayout)> = images.iter().zip(&layouts).map(|((d, _), l)| (d.as_slice(), l)).collect();
        let got = eval::average_precision_multi(&refs);
        let per: Vec<f64> = AP_THRESHOLDS.iter().map(|t| oracle_ap(images, u64::from(*t))).collect();
        let want = per.iter().sum::<f64>() / per.len() as f64;
        ensure((got.ap - want).abs() < 1e-12 && (got.ap50 - per[0]).abs() < 1e-12 && (got.ap75 - per[5]).abs() < 1e-12, || {
            format!("case {n}: {got:?} vs oracle ap {want} ap50 {} ap75 {}", per[0], per[5])
        })?;
    }
    let ap50 = detector_ap50()?;
    ensure(ap50 == 1.0, || format!("detector AP50 {ap50}"))?;
    Ok(format!("10000 IoUs exact, {} AP cases match, detector AP50 {ap50}", cases.len()))
}

// ---------------------------------------------------------------------------

fn fingerprint(s: &PipelineSession) -> (Phase, Vec<(String, String)>, Option<String>, Vec<&'static str>) {
    (
        s.phase(),
        s.artifacts.iter().map(|a| (a.name.clone(), a.sha256.clone())).collect(),
        s.current_image.clone(),
        s.state.plan.shape(),
    )
}

fn orchestrator_robustness() -> Check {
    let prompt = "a blue wooden horse and a red oval vase";
    let opts = SessionOptions { faults: scenecraft::engine::FaultPlan::FirstColored, seed: Some(3), ..Default::default() };
    let small = |c: &mut EngineConfig| c.policy.images_per_concept = 2;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let reference = {
        let e = engine(&dir, small);
        let s = e.create_session(prompt, &opts).map_err(|e| e.to_string())?;
        e.advance(&s.id).map_err(|e| e.to_string())?
    };
    ensure(reference.phase() == Phase::Done, || format!("reference ended in {}", reference.phase().name()))?;

    // A fresh engine for every step stands in for a process restart.
    let id = engine(&dir, small).create_session(prompt, &opts).map_err(|e| e.to_string())?.id;
    let mut steps = 0;
    let resumed = loop {
        let e = engine(&dir, small);
        let s = e.advance_one(&id).map_err(|e| e.to_string())?;
        steps += 1;
        if s.phase().is_terminal() || steps > 100 {
            break s;
        }
    };
    ensure(fingerprint(&resumed) == fingerprint(&reference), || "resumed run diverged from the reference".into())?;

    let e = engine(&dir, |c| {
        c.policy.images_per_concept = 1;
        c.fanout = 1;
    });
    let race_opts = SessionOptions { faults: scenecraft::engine::FaultPlan::FirstColored, ..Default::default() };
    let sequential = {
        let s = e.create_session("a red cat above a blue dog", &race_opts).map_err(|e| e.to_string())?;
        e.advance(&s.id).map_err(|e| e.to_string())?
    };
    for iteration in 0..100 {
        let s = e.create_session("a red cat above a blue dog", &race_opts).map_err(|e| e.to_string())?;
        let initial = s.state.clone();
        let applied = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..4 {
                scope.spawn(|| {
                    while let Ok(after) = e.advance_one(&s.id) {
                        applied.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if after.phase().is_terminal() {
                            break;
                        }
                    }
                });
            }
        });
        let done = e.get_session(&s.id).map_err(|e| e.to_string())?;
        let log = &done.state.log;
        ensure(log.iter().enumerate().all(|(i, t)| t.seq == i), || format!("iteration {iteration}: log sequence broken"))?;
        ensure(log.len() == applied.load(std::sync::atomic::Ordering::Relaxed), || {
            format!("iteration {iteration}: {} successful advances, {} transitions", applied.into_inner(), log.len())
        })?;
        ensure(log.len() == sequential.state.log.len(), || format!("iteration {iteration}: {} transitions", log.len()))?;
        let replayed = SessionState::replay(&initial, log).map_err(|e| format!("iteration {iteration}: {e}"))?;
        ensure(replayed == done.state, || format!("iteration {iteration}: replay differs"))?;
        ensure(fingerprint(&done) == fingerprint(&sequential), || format!("iteration {iteration}: artifacts differ"))?;
    }
    Ok(format!("resume after each of {steps} steps matches; 100 races without double application"))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Check); 7] = [
        ("appendix-fidelity", appendix_fidelity),
        ("policy-golden-table", policy_golden_table),
        ("closed-self-correction-loop", closed_loop),
        ("guidance-math", guidance_math),
        ("layout-engine", layout_engine),
        ("eval-harness", eval_harness),
        ("orchestrator-robustness", orchestrator_robustness),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
