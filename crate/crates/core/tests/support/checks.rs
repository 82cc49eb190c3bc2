// Criterion-level checks shared by the property tests and the acceptance
// suite. Each returns a one-line summary on success and a description of the
// first violation otherwise. Oracles here are written independently of the
// library code they check.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackvet::attention::CbamParams;
use stackvet::datagen::{augment, shift_stack, Combo, FrameSequence, Sample, SampleKind, Transform, FRAMES};
use stackvet::evaluation::{confusion, metrics, roc_auc, ConfusionCounts};
use stackvet::models::{build_model, conv_param_count, Model, ModelId, ModelSpec};
use stackvet::triage::{grid_search, lattice, triage_stats, TriagePolicy};
use stackvet::Tensor;

pub type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ------------------------------------------------------------------- CBAM

pub const FUZZ_CASES: usize = 100;

fn permuted<T: Copy>(v: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| v[i]).collect()
}

fn shuffled(n: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    p
}

pub fn cbam_properties() -> Check {
    let mut worst_inv: f64 = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for case in 0..FUZZ_CASES as u64 {
        let mut r = rng(1000 + case);
        let c = r.random_range(1..=12);
        let h = r.random_range(2..=9);
        let w = r.random_range(2..=9);
        let ratio = [1, 2, 4, 16][r.random_range(0..4)];
        let p = CbamParams::<f64>::init(c, ratio, &mut r);
        let f = Tensor::from_fn(&[c, h, w], |_| r.random_range(-5.0..5.0));
        let mc = p.channel_map(&f).map_err(|e| e.to_string())?;
        let ms = p.spatial_map(&f).map_err(|e| e.to_string())?;
        for &v in mc.data().iter().chain(ms.data()) {
            if !(v > 0.0 && v < 1.0) {
                return Err(format!("case {case}: attention coefficient {v} outside (0,1)"));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }

        // Mc is invariant to any permutation of pixel positions
        let sp = shuffled(h * w, &mut r);
        let mut moved = Vec::with_capacity(f.len());
        for ch in 0..c {
            moved.extend(permuted(&f.data()[ch * h * w..(ch + 1) * h * w], &sp));
        }
        let mc2 = p.channel_map(&Tensor::new(vec![c, h, w], moved).unwrap()).map_err(|e| e.to_string())?;
        for (a, b) in mc.data().iter().zip(mc2.data()) {
            worst_inv = worst_inv.max((a - b).abs());
        }

        // Ms is invariant to any permutation of channels
        let cp = shuffled(c, &mut r);
        let mut reordered = Vec::with_capacity(f.len());
        for &ch in &cp {
            reordered.extend_from_slice(&f.data()[ch * h * w..(ch + 1) * h * w]);
        }
        let ms2 = p.spatial_map(&Tensor::new(vec![c, h, w], reordered).unwrap()).map_err(|e| e.to_string())?;
        for (a, b) in ms.data().iter().zip(ms2.data()) {
            worst_inv = worst_inv.max((a - b).abs());
        }
        if worst_inv > 1e-10 {
            return Err(format!("case {case}: permutation invariance broken by {worst_inv:e}"));
        }

        let zero = CbamParams::<f64>::zeros(c, ratio);
        let out = zero.apply(&f).map_err(|e| e.to_string())?;
        if let Some((o, x)) = out.data().iter().zip(f.data()).find(|(o, x)| **o != 0.25 * **x) {
            return Err(format!("case {case}: zero weights gave {o} for input {x}, expected exactly {}", 0.25 * x));
        }
    }
    Ok(format!(
        "{FUZZ_CASES} cases: coefficients in [{lo:.4}, {hi:.4}], zero weights exact 0.25x, max permutation drift {worst_inv:.1e}"
    ))
}

// ---------------------------------------------------------------- metrics

/// Brute-force AUC: P(score+ > score-) + P(tie)/2 over all pairs.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn loop_counts(scores: &[f64], labels: &[u8], t: f64) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for i in 0..scores.len() {
        let predicted = !(scores[i] < t);
        let actual = labels[i] == 1;
        if predicted && actual {
            tp += 1;
        }
        if predicted && !actual {
            fp += 1;
        }
        if !predicted && actual {
            fn_ += 1;
        }
        if !predicted && !actual {
            tn += 1;
        }
    }
    (tp, fp, fn_, tn)
}

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        _ => false,
    }
}

/// Random scores of length 1..=max_len; some cases are quantized to force ties.
pub fn fuzz_scores(r: &mut ChaCha8Rng, max_len: usize) -> (Vec<f64>, Vec<u8>) {
    let n = r.random_range(1..=max_len);
    let levels = [0u32, 2, 5, 20, 100][r.random_range(0..5)];
    let p_pos = r.random_range(0.05..0.95);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = u8::from(r.random_bool(p_pos));
        let raw: f64 = (r.random::<f64>() + 0.3 * y as f64).min(1.0);
        let s = if levels == 0 {
            raw
        } else {
            (raw * levels as f64).round() / levels as f64
        };
        scores.push(s);
        labels.push(y);
    }
    (scores, labels)
}

pub const METRIC_CASES: usize = 1000;
pub const METRIC_MAX_LEN: usize = 500;

pub fn metric_oracles() -> Check {
    let mut r = rng(7);
    let (mut worst_metric, mut worst_auc, mut auc_cases) = (0.0f64, 0.0f64, 0);
    for case in 0..METRIC_CASES {
        let (scores, labels) = fuzz_scores(&mut r, METRIC_MAX_LEN);
        let t = [0.5, r.random::<f64>(), 0.0, 1.0][case % 4];
        let c = confusion(&scores, &labels, t).map_err(|e| e.to_string())?;
        let (tp, fp, fn_, tn) = loop_counts(&scores, &labels, t);
        if (c.tp, c.fp, c.fn_, c.tn) != (tp, fp, fn_, tn) {
            return Err(format!("case {case}: confusion {c:?} vs oracle {:?}", (tp, fp, fn_, tn)));
        }
        let m = metrics(&c);
        let (tpf, fpf, fnf, tnf) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
        let div = |a: f64, b: f64| if b == 0.0 { None } else { Some(a / b) };
        let precision = div(tpf, tpf + fpf);
        let recall = div(tpf, tpf + fnf);
        let oracle = [
            div(tpf + tnf, tpf + fpf + fnf + tnf),
            recall,
            precision,
            div(tnf, tnf + fnf),
            match (precision, recall) {
                (Some(p), Some(q)) if p + q > 0.0 => Some(2.0 / (1.0 / p + 1.0 / q)),
                _ => None,
            },
        ];
        let got = [m.accuracy, m.recall, m.precision, m.inverse_precision, m.f1];
        for (k, (g, o)) in got.iter().zip(&oracle).enumerate() {
            if !close(*g, *o, 1e-9) {
                return Err(format!("case {case}: metric #{k} = {g:?}, oracle {o:?}"));
            }
            if let (Some(a), Some(b)) = (g, o) {
                worst_metric = worst_metric.max((a - b).abs());
            }
        }
        let single_class = labels.iter().all(|&y| y == labels[0]);
        match roc_auc(&scores, &labels) {
            Ok((roc, auc)) => {
                let pw = pairwise_auc(&scores, &labels);
                worst_auc = worst_auc.max((auc - pw).abs());
                if (auc - pw).abs() > 1e-9 {
                    return Err(format!("case {case}: trapezoid AUC {auc} vs pairwise {pw}"));
                }
                if roc.first() != Some(&(0.0, 0.0)) || roc.last() != Some(&(1.0, 1.0)) {
                    return Err(format!("case {case}: ROC endpoints {:?} .. {:?}", roc.first(), roc.last()));
                }
                if roc.windows(2).any(|w| w[1].0 < w[0].0 || w[1].1 < w[0].1) {
                    return Err(format!("case {case}: ROC not monotone"));
                }
                auc_cases += 1;
            }
            Err(_) if single_class => {}
            Err(e) => return Err(format!("case {case}: {e}")),
        }
    }
    Ok(format!(
        "{METRIC_CASES} cases (n <= {METRIC_MAX_LEN}, {auc_cases} two-class): max metric diff {worst_metric:.1e}, max AUC diff {worst_auc:.1e}"
    ))
}

pub fn metric_example() -> Check {
    let m = metrics(&ConfusionCounts {
        tp: 3,
        fp: 1,
        fn_: 1,
        tn: 5,
    });
    let want = [0.8, 0.75, 0.75, 5.0 / 6.0, 0.75];
    let got = [m.accuracy, m.recall, m.precision, m.inverse_precision, m.f1];
    for (g, w) in got.iter().zip(want) {
        if !close(*g, Some(w), 1e-12) {
            return Err(format!("tp=3 fp=1 fn=1 tn=5: got {got:?}"));
        }
    }
    Ok("tp=3 fp=1 fn=1 tn=5 -> 0.8, 0.75, 0.75, 5/6, 0.75".into())
}

// --------------------------------------------------- stacking/augmentation

pub fn combo_channels() -> Check {
    let got: Vec<usize> = Combo::paper_set().iter().map(Combo::channels).collect();
    if got != [1, 3, 7, 15, 9] {
        return Err(format!("channel counts {got:?}"));
    }
    Ok(format!("{{32}}, {{32,16}}, {{32,16,8}}, {{32,16,8,4}}, {{32,4}} -> {got:?}"))
}

fn blank_sample(i: usize) -> Sample {
    Sample {
        id: format!("raw{i}"),
        source: i as u64,
        label: u8::from(i % 4 != 0),
        kind: SampleKind::Object,
        combo: Combo::new(&[32]).unwrap(),
        channels: Tensor::from_fn(&[1, 2, 2], |k| (i * 4 + k) as f32),
    }
}

pub fn sixfold_expansion() -> Check {
    let raw: Vec<Sample> = (0..1966).map(blank_sample).collect();
    let mut out = Vec::new();
    for s in &raw {
        out.extend(augment(s).map_err(|e| e.to_string())?);
    }
    let labels_kept = out.iter().all(|a| a.label == raw[a.source as usize].label);
    if out.len() != 11796 || !labels_kept {
        return Err(format!("1966 raw -> {} augmented (labels kept: {labels_kept})", out.len()));
    }
    Ok("1966 raw images -> 11796 augmented, labels preserved".into())
}

pub fn transforms_are_permutations() -> Check {
    for n in [1usize, 2, 3, 4, 7, 20] {
        // an image of its own flat indices must come back as a permutation
        let idx = Tensor::from_fn(&[3, n, n], |i| i as f32);
        for tr in Transform::ALL {
            let out = tr.apply(&idx).map_err(|e| e.to_string())?;
            for ch in 0..3 {
                let mut seen: Vec<usize> = out.data()[ch * n * n..(ch + 1) * n * n].iter().map(|&v| v as usize).collect();
                seen.sort_unstable();
                let want: Vec<usize> = (ch * n * n..(ch + 1) * n * n).collect();
                if seen != want {
                    return Err(format!("{tr:?} on {n}x{n} is not a per-channel permutation"));
                }
            }
        }
        let once = |tr: Transform, t: &Tensor<f32>| tr.apply(t).unwrap();
        let mut r4 = idx.clone();
        for _ in 0..4 {
            r4 = once(Transform::Rot90, &r4);
        }
        let hh = once(Transform::HFlip, &once(Transform::HFlip, &idx));
        let hv = once(Transform::HFlip, &once(Transform::VFlip, &idx));
        if r4 != idx || hh != idx || hv != once(Transform::Rot180, &idx) {
            return Err(format!("group identities fail on {n}x{n}"));
        }
    }
    Ok("6 transforms x 6 sizes are per-channel pixel permutations; rot90^4 = hflip^2 = id, rot180 = hflip.vflip".into())
}

pub fn median_identity() -> Check {
    let mut r = rng(3);
    for size in [20usize, 24] {
        let frame: Vec<f32> = (0..size * size).map(|_| r.random_range(-3.0..3.0)).collect();
        let seq = FrameSequence {
            size,
            frames: vec![frame.clone(); FRAMES],
            truth: None,
            noise_sigma: 0.0,
            psf_sigma: 1.0,
        };
        for depth in [4, 8, 16, 32] {
            let stacks = shift_stack(&seq, (0.0, 0.0), depth).map_err(|e| e.to_string())?;
            let o = (size - 20) / 2;
            for s in &stacks {
                for (i, &v) in s.data().iter().enumerate() {
                    if v != frame[(o + i / 20) * size + o + i % 20] {
                        return Err(format!("depth {depth}: stacked pixel {i} = {v} differs from the frame"));
                    }
                }
            }
        }
    }
    Ok("median stack of 32 identical frames equals the frame at depths 4/8/16/32".into())
}

// ------------------------------------------------------------- parameters

pub fn param_ordering() -> Check {
    let order = [ModelId::Cnn1, ModelId::Cnn3, ModelId::Cnn2, ModelId::Cnn4, ModelId::Cnn5, ModelId::Cnn6];
    let mut lines = Vec::new();
    for cin in [1usize, 3, 7, 9, 15] {
        for cbam in [false, true] {
            let counts: Vec<usize> = order
                .iter()
                .map(|&id| {
                    let m: Model = build_model(&ModelSpec::new(id, cin, cbam), &mut rng(0)).unwrap();
                    m.param_count()
                })
                .collect();
            if counts.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("in_channels {cin}, cbam {cbam}: CNN1,3,2,4,5,6 counts {counts:?} not strictly increasing"));
            }
            if cin == 9 && cbam {
                lines.push(format!("{counts:?}"));
            }
        }
    }
    if conv_param_count(3, 32, 3, true) != 896 {
        return Err(format!("conv 3->32 = {}", conv_param_count(3, 32, 3, true)));
    }
    Ok(format!(
        "CNN1<CNN3<CNN2<CNN4<CNN5<CNN6 for in_channels 1/3/7/9/15 with and without attention (9ch+attention: {}); conv 3->32 = 896",
        lines.join("")
    ))
}

// ----------------------------------------------------------------- triage

/// Exhaustive lattice evaluation by direct counting.
pub fn brute_force_rows(scores: &[f64], labels: &[u8], step: f64) -> Vec<(f64, f64, Option<f64>, Option<f64>, f64)> {
    let n = (1.0 / step).round() as usize;
    let mut rows = Vec::new();
    for i in 0..=n {
        for j in 0..=i {
            let (pos, neg) = (i as f64 / n as f64, j as f64 / n as f64);
            let (mut ap, mut apo, mut an, mut ann, mut human) = (0usize, 0usize, 0usize, 0usize, 0usize);
            for (&s, &y) in scores.iter().zip(labels) {
                if s > pos {
                    ap += 1;
                    apo += (y == 1) as usize;
                } else if s < neg {
                    an += 1;
                    ann += (y == 0) as usize;
                } else {
                    human += 1;
                }
            }
            let p = (ap > 0).then(|| apo as f64 / ap as f64);
            let ip = (an > 0).then(|| ann as f64 / an as f64);
            rows.push((pos, neg, p, ip, human as f64 / scores.len() as f64));
        }
    }
    rows
}

pub fn grid_equals_brute_force(cases: usize) -> Check {
    let mut r = rng(11);
    let mut rows_checked = 0;
    for case in 0..cases {
        let (scores, labels) = fuzz_scores(&mut r, 300);
        let step = [0.01, 0.05, 0.1, 0.25, 0.5][case % 5];
        let table = grid_search(&scores, &labels, step).map_err(|e| e.to_string())?;
        let brute = brute_force_rows(&scores, &labels, step);
        if table.rows.len() != brute.len() {
            return Err(format!("case {case}: {} rows vs {}", table.rows.len(), brute.len()));
        }
        for (a, b) in table.rows.iter().zip(&brute) {
            if (a.pos, a.neg, a.precision, a.inverse_precision, a.remaining_ratio) != *b {
                return Err(format!("case {case}: row {a:?} vs brute force {b:?}"));
            }
        }
        rows_checked += brute.len();
    }
    Ok(format!("{cases} score sets, {rows_checked} lattice rows identical to exhaustive counting"))
}

pub fn remaining_monotonicity(pairs: usize) -> Check {
    let mut r = rng(12);
    for case in 0..pairs {
        let (scores, labels) = fuzz_scores(&mut r, 300);
        let mut a = [r.random::<f64>(), r.random::<f64>()];
        a.sort_by(f64::total_cmp);
        let inner = TriagePolicy::new(a[1], a[0]).unwrap();
        let outer = TriagePolicy::new(r.random_range(a[1]..=1.0), r.random_range(0.0..=a[0])).unwrap();
        let ri = triage_stats(&scores, &labels, &inner).map_err(|e| e.to_string())?.remaining_ratio;
        let ro = triage_stats(&scores, &labels, &outer).map_err(|e| e.to_string())?.remaining_ratio;
        if ro < ri {
            return Err(format!("case {case}: enlarging {inner:?} to {outer:?} lowered remaining ratio {ri} -> {ro}"));
        }
    }
    Ok(format!("{pairs} nested policy pairs: enlarging the band never lowers the remaining ratio"))
}

pub fn degenerate_policy() -> Check {
    let mut r = rng(13);
    for case in 0..200 {
        let (mut scores, labels) = fuzz_scores(&mut r, 200);
        let t = lattice(0.05).unwrap()[r.random_range(0..21)];
        // plant a few exact-boundary scores
        for s in scores.iter_mut().take(3) {
            *s = t;
        }
        let st = triage_stats(&scores, &labels, &TriagePolicy::new(t, t).unwrap()).map_err(|e| e.to_string())?;
        let boundary = scores.iter().filter(|&&s| s == t).count();
        if st.human_review != boundary || st.remaining_ratio != boundary as f64 / scores.len() as f64 {
            return Err(format!("case {case}: pos=neg={t} sent {} to review, {boundary} on the boundary", st.human_review));
        }
    }
    Ok("200 cases: pos = neg routes exactly the boundary scores to review".into())
}
