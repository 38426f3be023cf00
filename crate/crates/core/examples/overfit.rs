//! Overfits the full preset on one synthetic phantom and reports Dice.

use std::ops::ControlFlow;

use deep_fext::metrics::max_dice;
use deep_fext::synth::smoke_phantom;
use deep_fext::{Model, ModelSpec, Task, TrainConfig, Trainer};

fn main() -> deep_fext::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let image = smoke_phantom(0)?;
    let cfg = TrainConfig {
        max_steps: Some(steps),
        patch_size: 64,
        patches_per_step: 1,
        batch_pixels: 512,
        learning_rate: 3e-3,
        ..Default::default()
    };
    let model = Model::new(ModelSpec::preset("fext5-100", Task::Vessel)?, 0)?;
    let mut trainer = Trainer::new(model, std::slice::from_ref(&image), cfg)?;
    let start = std::time::Instant::now();
    trainer.run(None, |r, model| {
        if r.step % 50 == 0 {
            let probs = model.predict_maps(&image.image).expect("predict");
            let (d, t) = max_dice(&probs[1], &image.vessel_mask, None).expect("dice");
            println!("step {} loss {:.4} dice {d:.4}@{t:.2} {:.1}s", r.step, r.loss, start.elapsed().as_secs_f32());
        }
        ControlFlow::Continue(())
    })
}
