use crate::model::config::ModelConfig;

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn batch_norm(c: usize) -> usize {
    2 * c
}

fn wavemix_block(c: usize, level: usize, mult: usize) -> usize {
    let mut n = conv(c, c / 4, 1);
    for l in 1..=level {
        n += conv(c, c * mult, 1) + conv(c * mult, c, 1);
        if l > 1 {
            let s = 1 << (l - 1);
            n += conv(c, c, s);
        }
    }
    n + conv(c, c, 4) + batch_norm(c)
}

/// Trainable scalars of the network described by `cfg`, by layer formula.
/// Batch-norm running statistics are not counted.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let c = cfg.embed_dim;
    let c1 = conv(4, c, 3);
    let blocks = cfg.blocks_per_module * wavemix_block(c, cfg.dwt_level, cfg.mlp_mult);
    let depthconv = if cfg.use_depthconv { c * 25 + c + batch_norm(c) } else { 0 };
    let decoder = conv(2 * c, c / 2, 4) + batch_norm(c / 2);
    let c2 = conv(c / 2 + 3, 3, 3);
    cfg.modules * (c1 + blocks + depthconv + decoder + c2)
}
