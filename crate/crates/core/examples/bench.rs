use eegssm::model::{Model, ModelConfig};
use eegssm::ssl::{mask_patches, recon_loss, sample_views, crop_batch, jepa_pred_loss, sigreg};
use eegssm::synth::{synth_dataset, SynthConfig};
use eegssm::trainer::pool_windows;
use eegssm::Tape;
use std::time::Instant;

fn main() {
    let recs = synth_dataset(&SynthConfig { channels: 20, classes: 2, subjects: 2, seconds: 60.0, fs: 256.0 }, 0).unwrap();
    let data = pool_windows(&recs, 5.0, None).unwrap();
    let model = Model::pretrain(ModelConfig::default(), 0).unwrap();
    let b = 4;
    let idx: Vec<usize> = (0..b).collect();
    let batch = data.subset(&idx);

    // recon forward+backward
    for name in ["recon", "jepa", "mixed"] {
        let t0 = Instant::now();
        let iters = 3;
        for step in 0..iters {
            let t = Tape::new();
            let bind = model.params.bind(&t);
            let mut total = None;
            if name != "jepa" {
                let plan = mask_patches(b, 20, 0.6, 0, step).unwrap();
                let (pred, grid) = model.reconstruct(&t, &bind, &batch, Some(&plan.flags)).unwrap();
                let r = recon_loss(&t, pred, &grid.patches, &plan).unwrap();
                total = Some(r);
            }
            if name != "recon" {
                let views = sample_views(1280, 64, 960, 320, b, 0, step).unwrap();
                let mut embs = Vec::new();
                let mut globals = Vec::new();
                let mut locals = Vec::new();
                for offs in &views.global_offsets {
                    let cropb = crop_batch(&batch, offs, views.global_len).unwrap();
                    let e = model.embed_pooled(&t, &bind, &cropb).unwrap();
                    globals.push(e); embs.push(e);
                }
                for offs in &views.local_offsets {
                    let cropb = crop_batch(&batch, offs, views.local_len).unwrap();
                    let e = model.embed_pooled(&t, &bind, &cropb).unwrap();
                    locals.push(e); embs.push(e);
                }
                let j = jepa_pred_loss(&t, &locals, &globals).unwrap();
                let emb = t.concat(&embs, 0).unwrap();
                let sg = sigreg(&t, emb, 60, 0, step).unwrap();
                let reg = t.mul_scalar(t.add(j, sg).unwrap(), 0.5).unwrap();
                total = Some(match total { Some(r) => t.add(r, reg).unwrap(), None => reg });
            }
            let root = total.unwrap();
            let _ = t.backward(root).unwrap();
        }
        println!("{name}: {:.0} ms/step (B={b}, C=20, Tw=1280)", t0.elapsed().as_millis() as f64 / iters as f64);
    }
}
