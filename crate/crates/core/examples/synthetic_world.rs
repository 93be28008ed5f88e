//! Explores the synthetic render-and-encode world: how far apart views of one
//! identity are compared with other identities, what pseudo-text augmentation
//! does, and the dataset file round trip.
//!
//! ```bash
//! cargo run -p clfusion --example synthetic_world
//! ```

use clfusion::data::{generate_dataset, pseudo_text_augment, Backend, CameraPose, Dataset, SyntheticWorld, WorldConfig};
use clfusion::eval::cosine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> clfusion::Result<()> {
    let world = SyntheticWorld::new(WorldConfig::default())?;
    println!("backend: {}", world.descriptor());

    let ds = generate_dataset(&world, 16, 4, 0, serde_json::Value::Null)?;
    let (a, b) = (&ds.identities[0], &ds.identities[1]);
    for (i, v) in a.views.iter().enumerate() {
        println!(
            "identity 0 view {i}: yaw {:+.3} pitch {:+.3}  cos to view 0 {:.3}  cos to identity 1 view {i} {:.3}",
            v.pose.yaw,
            v.pose.pitch,
            cosine(&v.embedding.values, &a.views[0].embedding.values),
            cosine(&v.embedding.values, &b.views[i].embedding.values),
        );
    }

    let frontal = world.embed_view(&a.w0, CameraPose::new(0.0, 0.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for xi in [0.05, 0.1, 0.3] {
        let t = pseudo_text_augment(&frontal, xi, &mut rng)?;
        let angle = cosine(&t.values, &frontal.values).clamp(-1.0, 1.0).acos().to_degrees();
        println!("pseudo-text xi {xi}: {angle:.2} degrees from the image embedding");
    }

    let path = std::env::temp_dir().join("clfusion_example.clfd");
    ds.write(&path)?;
    let back = Dataset::read(&path)?;
    println!(
        "wrote {} identities x {} views to {} ({} bytes), read back equal: {}",
        back.len(),
        back.header.views_per_identity,
        path.display(),
        std::fs::metadata(&path)?.len(),
        back == ds
    );
    std::fs::remove_file(&path)?;
    Ok(())
}
