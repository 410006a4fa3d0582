//! Sparse encoder over visible tokens, decoder over the full sequence, and
//! the two-branch projection head.

use dualmim::autodiff::Tape;
use dualmim::masking::gen_mask;
use dualmim::rng::stream;
use dualmim::vit::{Decoder, Encoder, ProjectionHead, ProjectionHeadConfig, TokenBatch, ViTConfig};

fn main() -> dualmim::Result<()> {
    let cfg = ViTConfig::default();
    let (n, pd) = (cfg.num_patches(), cfg.patch_dim());
    let mut rng = stream(0, &[]);
    let (encoder, enc) = Encoder::new(&cfg, &mut rng);
    let (decoder, dec) = Decoder::new(&cfg, &mut rng);
    let head_cfg = ProjectionHeadConfig { hidden_dim: 256, ..Default::default() };
    let (head, head_params) = ProjectionHead::new(&head_cfg, cfg.embed_dim, &mut rng);

    let batch = 2;
    let masks: Vec<_> = (0..batch).map(|_| gen_mask(n, 0.75, &mut rng)).collect::<Result<_, _>>()?;
    let vis = masks[0].visible.len();
    let positions: Vec<usize> = masks.iter().flat_map(|m| m.visible.clone()).collect();
    let data = vec![0.1f32; batch * vis * pd];
    let tokens = TokenBatch::new(batch, vis, pd, data, positions)?;

    let mut tape = Tape::no_grad();
    let encoded = encoder.forward(&mut tape, &enc, &tokens, Some(&mut stream(0, &[1])))?;
    let decoded = decoder.forward(&mut tape, &dec, &encoded, &masks)?;
    let out = decoder_rows(&mut tape, &head, &head_params, decoded, batch, n)?;
    println!("patches per image: {n}, visible: {vis}");
    println!("encoder output: {:?}", tape.shape(encoded.tokens));
    println!("decoder output: {:?}", tape.shape(decoded));
    println!("class scores:   {:?}", tape.shape(out.0));
    println!("patch scores:   {:?}", tape.shape(out.1));
    Ok(())
}

fn decoder_rows(
    tape: &mut Tape,
    head: &ProjectionHead,
    params: &dualmim::autodiff::ParamStore,
    decoded: dualmim::autodiff::Var,
    batch: usize,
    n: usize,
) -> dualmim::Result<(dualmim::autodiff::Var, dualmim::autodiff::Var)> {
    let class_idx: Vec<usize> = (0..batch).map(|b| b * (n + 1)).collect();
    let patch_idx: Vec<usize> = (0..batch).flat_map(|b| (1..=n).map(move |i| b * (n + 1) + i)).collect();
    let c = tape.index_rows(decoded, &class_idx)?;
    let p = tape.index_rows(decoded, &patch_idx)?;
    let (cs, ps, _) = head.forward_rows(tape, params, Some(c), Some(p))?;
    Ok((cs.expect("class rows"), ps.expect("patch rows")))
}
