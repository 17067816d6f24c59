use std::time::Instant;
use pfenet_core::episodes::{self, DatasetConfig, FoldScheme, Phase};
use pfenet_core::model::{CachedEpisode, ModelConfig, OptimConfig, PFENet, SupportInput};
use pfenet_core::rng::stream_rng;
use pfenet_core::tensor::LrSchedule;

#[test]
#[ignore]
fn timing() {
    let ds = episodes::generate(&DatasetConfig::default()).unwrap();
    let split = episodes::split(12, 0, FoldScheme::Contiguous).unwrap();
    let mut model = PFENet::new(&ModelConfig::default(), 1).unwrap();

    let t = Instant::now();
    let feats: Vec<_> = (0..ds.len())
        .map(|i| model.extract_sample_features(&ds.get(i).image).unwrap())
        .collect();
    println!("extract {} images: {:?} ({:?}/img)", ds.len(), t.elapsed(), t.elapsed() / ds.len() as u32);

    let schedule = LrSchedule { base_lr: 0.0025, power: 0.9, max_iter: 1000 };
    let optim = OptimConfig::default();
    let mut rng = stream_rng(2, &[]);
    let t = Instant::now();
    let n_train: u32 = 60;
    for iter in 0..n_train as usize {
        let ep = episodes::sample_episode(&ds, &split, Phase::Train, 1, &mut rng).unwrap();
        let q = &feats[ep.query_index];
        let cached = CachedEpisode {
            class: ep.class,
            query: q,
            query_mask: &ep.query_mask,
            supports: ep.supports.iter().map(|s| SupportInput { index: s.index, features: &feats[s.index], mask: &s.mask }).collect(),
        };
        model.train_episode_cached(&cached, &optim, &schedule, iter, &split).unwrap();
    }
    println!("train step: {:?}", t.elapsed() / n_train);

    let t = Instant::now();
    let n_eval = 100;
    for _ in 0..n_eval {
        let ep = episodes::sample_episode(&ds, &split, Phase::Test, 1, &mut rng).unwrap();
        let supports: Vec<SupportInput> = ep.supports.iter().map(|s| SupportInput { index: s.index, features: &feats[s.index], mask: &s.mask }).collect();
        let _ = model.predict_cached(&feats[ep.query_index], &supports).unwrap();
    }
    println!("eval episode: {:?}", t.elapsed() / n_eval);

    // 5-shot eval
    let t = Instant::now();
    for _ in 0..50 {
        let ep = episodes::sample_episode(&ds, &split, Phase::Test, 5, &mut rng).unwrap();
        let supports: Vec<SupportInput> = ep.supports.iter().map(|s| SupportInput { index: s.index, features: &feats[s.index], mask: &s.mask }).collect();
        let _ = model.predict_cached(&feats[ep.query_index], &supports).unwrap();
    }
    println!("eval episode (5-shot): {:?}", t.elapsed() / 50);
}
