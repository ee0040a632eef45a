use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pagescribe::ctc::{best_path_decode, collapse, ctc_loss};
use pagescribe::data::{gen_synthetic_page, GlyphSet, Layout, NoiseParams, PageSpec, SymbolTable};
use pagescribe::imageprep::{
    deslant, deslant_angle, flatten_page_1d, join_transcripts, reconstruct_clean_page, resize_line, resize_page,
    scaled_width, shear, BinaryImage,
};
use pagescribe::metrics::{cer, edit_distance};
use pagescribe::model::bootstrap_from_line_model;
use pagescribe::tensor::{conv_output_extent, log_softmax_rows};
use pagescribe::trainer::{feasibility_check, AdamState, Checkpoint, PreparedSample, RngState};
use pagescribe::{Backend, Graph, Mode, Model, ModelConfig, Tensor};

fn log_probs(t: usize, k: usize, seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Tensor::uniform(&[t, k], scale, &mut rng);
    Tensor::new(vec![t, k], log_softmax_rows(raw.data(), k)).unwrap()
}

fn image(h: usize, w: usize, seed: u64, density: f64) -> BinaryImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::uniform(&[h * w], 0.5, &mut rng);
    let pixels = t.data().iter().map(|v| u8::from(v + 0.5 < density)).collect();
    BinaryImage::from_pixels(h, w, pixels).unwrap()
}

fn page(seed: u64, lines: usize, noise: bool) -> pagescribe::data::SyntheticPage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = PageSpec {
        noise: if noise {
            NoiseParams::standard()
        } else {
            NoiseParams::none()
        },
        ..PageSpec::new(lines, 5, Layout::TwoD)
    };
    gen_synthetic_page(&mut rng, &GlyphSet::digits(), &spec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn log_softmax_rows_sum_to_one(t in 1usize..8, k in 1usize..12, seed: u64, scale in 0.1f64..40.0) {
        let lp = log_probs(t, k, seed, scale);
        for row in lp.data().chunks(k) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_shape_matches_closed_form(
        h in 1usize..12, w in 1usize..12, kh in 1usize..5, kw in 1usize..5,
        sh in 1usize..4, sw in 1usize..4, ph in 0usize..3, pw in 0usize..3,
    ) {
        prop_assume!(h + 2 * ph >= kh && w + 2 * pw >= kw);
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(Tensor::zeros(&[2, h, w]));
        let k = g.constant(Tensor::zeros(&[3, 2, kh, kw]));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.conv2d(x, k, b, (sh, sw), (ph, pw)).unwrap();
        let want = [3, (h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1];
        prop_assert_eq!(g.shape(y), &want[..]);
        prop_assert_eq!(conv_output_extent(h, kh, sh, ph), Some(want[1]));
    }

    #[test]
    fn default_stack_divides_width_by_eight(w8 in 8usize..=512, l in 1usize..6) {
        let w = w8 * 8;
        for cfg in [ModelConfig::paper(Backend::Transformer, 10), ModelConfig::toy(Backend::Blstm, 10)] {
            prop_assert_eq!(cfg.output_lengths(64 * l, w).unwrap(), (l, w / 8));
        }
    }

    #[test]
    fn flatten_transpose_is_a_bijection(c in 1usize..5, l in 1usize..4, w in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fmap = Tensor::uniform(&[c, l, w], 1.0, &mut rng);
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(fmap.clone());
        let y = g.flatten_transpose(x).unwrap();
        let flat = g.value(y);
        prop_assert_eq!(flat.shape(), &[l * w, c][..]);
        let mut back = vec![0.0; c * l * w];
        for p in 0..l * w {
            for ch in 0..c {
                back[ch * l * w + p] = flat.data()[p * c + ch];
            }
        }
        prop_assert_eq!(back, fmap.data().to_vec());
    }

    #[test]
    fn ctc_probabilities_over_all_targets_sum_to_one(t in 1usize..5, seed: u64) {
        // every label sequence of length <= t over 2 symbols plus blank
        let (k, blank) = (3, 2);
        let lp = log_probs(t, k, seed, 3.0);
        let mut total = 0.0;
        for len in 0..=t {
            for code in 0..(1usize << len) {
                let target: Vec<usize> = (0..len).map(|i| (code >> i) & 1).collect();
                if let Ok(out) = ctc_loss(&lp, &target, blank) {
                    let p = (-out.loss).exp();
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
                    total += p;
                }
            }
        }
        prop_assert!((total - 1.0).abs() < 1e-9, "{}", total);
    }

    #[test]
    fn ctc_gradient_rows_are_negative_posteriors(t in 3usize..30, k in 2usize..6, seed: u64, len in 0usize..4) {
        let blank = k - 1;
        let target: Vec<usize> = (0..len).map(|i| (i * 7 + seed as usize) % blank.max(1)).collect();
        prop_assume!(blank > 0 || target.is_empty());
        let lp = log_probs(t, k, seed, 2.0);
        let out = ctc_loss(&lp, &target, blank);
        prop_assume!(out.is_ok());
        let out = out.unwrap();
        for row in out.grad.chunks(k) {
            prop_assert!(row.iter().all(|g| *g <= 1e-12));
            prop_assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn appending_a_frame_keeps_probability(t in 1usize..10, seed: u64, len in 0usize..4) {
        let (k, blank) = (4, 3);
        let target: Vec<usize> = (0..len).map(|i| (i + seed as usize) % 3).collect();
        let longer = log_probs(t + 1, k, seed, 3.0);
        let shorter = Tensor::new(vec![t, k], longer.data()[..t * k].to_vec()).unwrap();
        let Ok(short) = ctc_loss(&shorter, &target, blank) else { return Ok(()) };
        let long = ctc_loss(&longer, &target, blank).unwrap();
        let min_p = longer.data()[t * k..].iter().map(|v| v.exp()).fold(1.0, f64::min);
        prop_assert!((-long.loss).exp() >= (-short.loss).exp() * min_p * (1.0 - 1e-12));
    }

    #[test]
    fn best_path_is_collapsed_argmax(t in 1usize..40, k in 2usize..6, seed: u64) {
        let blank = k - 1;
        let lp = log_probs(t, k, seed, 4.0);
        let out = best_path_decode(&lp, blank);
        prop_assert!(!out.contains(&blank));
        let argmax: Vec<usize> = lp
            .data()
            .chunks(k)
            .map(|r| (0..k).fold(0, |b, i| if r[i] > r[b] { i } else { b }))
            .collect();
        prop_assert_eq!(&out, &collapse(&argmax, blank));
        // adjacent repeats only where a blank frame separates them
        let mut prev: Option<usize> = None;
        let mut emitted = Vec::new();
        for &a in &argmax {
            if a != blank && Some(a) != prev {
                emitted.push(a);
            }
            prev = Some(a);
        }
        prop_assert_eq!(out, emitted);
    }

    #[test]
    fn edit_distance_is_a_metric(
        a in proptest::collection::vec(0u8..3, 0..=12),
        b in proptest::collection::vec(0u8..3, 0..=12),
        c in proptest::collection::vec(0u8..3, 0..=12),
    ) {
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn cer_ignores_sample_order(
        pairs in proptest::collection::vec(
            (proptest::collection::vec(0u8..4, 1..8), proptest::collection::vec(0u8..4, 0..8)),
            1..10,
        ),
        rot in 0usize..10,
    ) {
        let (refs, hyps): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let mut shuffled = pairs.clone();
        shuffled.rotate_left(rot % pairs.len());
        shuffled.reverse();
        let (r2, h2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        prop_assert_eq!(cer(&refs, &hyps, 1.0).unwrap(), cer(&r2, &h2, 1.0).unwrap());
    }

    #[test]
    fn whitespace_is_a_symbol(n in 1usize..6) {
        let refs = vec![vec!['a'; n].into_iter().chain([' ', 'b']).collect::<Vec<_>>()];
        let hyps = vec![vec!['a'; n].into_iter().chain(['b']).collect::<Vec<_>>()];
        let r = cer(&refs, &hyps, 1.0).unwrap();
        prop_assert_eq!((r.n_edits, r.n_ref_chars), (1, n + 2));
    }

    #[test]
    fn resize_keeps_aspect_ratio(h in 8usize..160, w in 8usize..400, l in 1usize..4, seed: u64) {
        let img = image(h, w, seed, 0.2);
        for (t, target) in [(resize_line(&img).unwrap(), 64), (resize_page(&img, l).unwrap(), 64 * l)] {
            let sw = scaled_width(h, w, target);
            prop_assert!((sw as f64 - w as f64 * target as f64 / h as f64).abs() <= 1.0);
            prop_assert_eq!(t.shape(), &[1, target, sw.div_ceil(8) * 8][..]);
            prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hyphen_merge_length_formula(
        lines in proptest::collection::vec("[ab-]{0,6}", 1..6),
    ) {
        let joined = join_transcripts(&lines);
        let n = lines.len();
        let hyphens = lines[..n - 1].iter().filter(|l| l.ends_with('-')).count();
        let total: usize = lines.iter().map(|l| l.chars().count()).sum();
        prop_assert_eq!(joined.chars().count(), total + (n - 1) - 2 * hyphens);
    }

    #[test]
    fn flatten_keeps_every_line(widths in proptest::collection::vec((4usize..20, 1usize..30), 1..5), seed: u64) {
        let imgs: Vec<BinaryImage> = widths.iter().enumerate().map(|(i, &(h, w))| image(h, w, seed ^ i as u64, 0.3)).collect();
        let texts: Vec<String> = (0..imgs.len()).map(|i| format!("l{i}")).collect();
        let (flat, text) = flatten_page_1d(&imgs, &texts).unwrap();
        prop_assert_eq!(text, join_transcripts(&texts));
        prop_assert_eq!(flat.signal_count(), imgs.iter().map(BinaryImage::signal_count).sum::<usize>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn clean_reconstruction_is_pixel_exact(seed: u64, lines in 1usize..4) {
        let p = page(seed, lines, true);
        let crops: Vec<BinaryImage> = p.boxes.iter().map(|b| p.image.crop(b).unwrap()).collect();
        let rebuilt = reconstruct_clean_page(p.image.height(), p.image.width(), &p.boxes, &crops).unwrap();
        prop_assert_eq!(&rebuilt, &p.clean);
        for y in 0..rebuilt.height() {
            for x in 0..rebuilt.width() {
                let inside = p.boxes.iter().any(|b| (b.y..b.y + b.h).contains(&y) && (b.x..b.x + b.w).contains(&x));
                if inside {
                    prop_assert_eq!(rebuilt.get(y, x), p.image.get(y, x));
                } else {
                    prop_assert!(!rebuilt.get(y, x));
                }
            }
        }
    }

    #[test]
    fn deslant_is_idempotent(seed: u64, deg in -30.0f64..30.0) {
        let p = page(seed, 1, false);
        let line = p.image.crop(&p.boxes[0]).unwrap();
        let once = deslant(&shear(&line, deg));
        prop_assert!(deslant_angle(&once).abs() <= 1, "{}", deslant_angle(&once));
    }

    #[test]
    fn symbol_table_round_trips(texts in proptest::collection::vec("[a-z0-9 .,-]{1,12}", 1..6)) {
        let table = SymbolTable::build(&texts).unwrap();
        let mut reversed = texts.clone();
        reversed.reverse();
        let again = SymbolTable::build(&reversed).unwrap();
        prop_assert_eq!(table.content_hash(), again.content_hash());
        for t in &texts {
            let ids = table.encode(t).unwrap();
            prop_assert!(ids.iter().all(|&i| i != table.blank()));
            prop_assert_eq!(&table.decode(&ids), t);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed: u64, blstm: bool) {
        let symbols = SymbolTable::build(&["0123 "]).unwrap();
        let backend = if blstm { Backend::Blstm } else { Backend::Transformer };
        let model = Model::new(ModelConfig::toy(backend, symbols.n_symbols()), seed).unwrap();
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Checkpoint::from_model(&model, &symbols, AdamState::new(model.params()), 3, RngState::capture(&rng));
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn feasible_samples_never_fail_ctc(w8 in 1usize..40, len in 0usize..30, seed: u64) {
        let cfg = ModelConfig::toy(Backend::Transformer, 5);
        let target: Vec<usize> = (0..len).map(|i| (i / 2 + seed as usize) % 4).collect();
        let s = PreparedSample { name: "s".into(), input: Tensor::zeros(&[1, 64, w8 * 8]), transcript: String::new(), target };
        let (ok, _) = feasibility_check(&cfg, std::slice::from_ref(&s));
        if let Some(s) = ok.first() {
            let (h, w) = cfg.output_lengths(64, s.input.shape()[2]).unwrap();
            prop_assert!(ctc_loss(&log_probs(h * w, 5, seed, 1.0), &s.target, cfg.blank()).is_ok());
        }
    }

    #[test]
    fn identical_seeds_give_identical_outputs(seed: u64, w8 in 8usize..16) {
        let cfg = ModelConfig::toy(Backend::Transformer, 6);
        let x = Tensor::uniform(&[1, 64, w8 * 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let run = || {
            let m = Model::new(cfg.clone(), seed).unwrap();
            let mut g = Graph::new(Mode::Train, seed);
            let f = m.forward(&mut g, &x).unwrap();
            g.value(f.logits).clone()
        };
        let (a, b) = (run(), run());
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn bootstrapped_single_line_page_matches_line_model(seed: u64, w8 in 8usize..20, blstm: bool) {
        let backend = if blstm { Backend::Blstm } else { Backend::Transformer };
        let line = Model::new(ModelConfig::toy(backend, 6), seed).unwrap();
        let (page, _) = bootstrap_from_line_model(&line, "h", &ModelConfig::toy(backend, 6).with_oversample(1), "h", seed ^ 1).unwrap();
        let x = Tensor::uniform(&[1, 64, w8 * 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = (line.logits(&x).unwrap(), page.logits(&x).unwrap());
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
