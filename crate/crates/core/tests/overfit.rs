use wavepaint::metrics::{hybrid_loss, IdentityExtractor, LossWeights};
use wavepaint::model::{composite, ModelConfig, WavePaint};
use wavepaint::nn::Mode;
use wavepaint::train::{train_step, AdamWConfig, Optimizer};
use wavepaint::{default_policy, generate_mask, MaskKind, Tensor};

fn scene(size: usize) -> Tensor<f32> {
    let s = size as f32;
    Tensor::from_fn(&[1, 3, size, size], |i| {
        let c = i / (size * size);
        let y = (i / size) % size;
        let x = i % size;
        let (xf, yf) = (x as f32 / s, y as f32 / s);
        let v = match c {
            0 => 0.5 + 0.3 * (6.0 * xf).sin() * (4.0 * yf).cos(),
            1 => 0.2 + 0.6 * yf,
            _ => 0.5 + 0.35 * ((x / 8 + y / 8) % 2) as f32 - 0.15,
        };
        v.clamp(0.1, 0.9)
    })
}

fn masked_l1(y: &Tensor<f32>, x: &Tensor<f32>, m: &Tensor<f32>) -> f32 {
    let hw = m.len();
    let (mut s, mut n) = (0.0, 0);
    for c in 0..3 {
        for p in 0..hw {
            if m.data()[p] == 0.0 {
                s += (y.data()[c * hw + p] - x.data()[c * hw + p]).abs();
                n += 1;
            }
        }
    }
    s / n as f32
}

#[test]
fn overfits_single_image() {
    let cfg = ModelConfig { modules: 1, embed_dim: 64, ..Default::default() };
    let model = WavePaint::new(cfg).unwrap();
    let mut params = model.init_params::<f32>(0);
    let mut opt = Optimizer::adamw(AdamWConfig::default(), &params);
    let x = scene(64);
    let m = generate_mask(&default_policy(MaskKind::Medium), 64, 64, 3).unwrap().mask.to_tensor::<f32>();
    let w = LossWeights::default();
    let mut first = None;
    for _ in 0..200 {
        let l = train_step(&model, &mut params, &mut opt, &x, &m, &w, &IdentityExtractor).unwrap();
        first.get_or_insert(l.total);
    }
    let first = first.unwrap();
    let y = model.forward(&params, &x, &m, Mode::Train).unwrap();
    let end = hybrid_loss(&y, &x, &m, &w, &IdentityExtractor).unwrap().total;
    assert!(end <= 0.1 * first, "loss {first} -> {end}");
    let y = model.forward(&params, &x, &m, Mode::Eval).unwrap();
    let l1 = masked_l1(&composite(&x, &m, &y).unwrap(), &x, &m);
    assert!(l1 < 0.05, "masked L1 {l1}");
}
