// scratch profiler
use atf_core::zoo::synth_dataset;
use atf_oracle::detector::{high_frequency_energy, median_block_mean};
use atf_oracle::{OraclePolicy, OracleService};
use std::time::Instant;

fn main() {
    let policy = OraclePolicy::default();
    let t0 = Instant::now();
    let svc = OracleService::build(policy).unwrap();
    println!("build: {:?}", t0.elapsed());

    let data = synth_dataset(123, 40);
    let imgs: Vec<_> = data.samples.iter().map(|s| s.image.clone()).collect();

    // end-to-end classify
    let sid = svc.open_session();
    let n = 4000usize;
    let t = Instant::now();
    for i in 0..n {
        let img = &imgs[i % imgs.len()];
        let r = svc.classify(sid, img);
        std::hint::black_box(&r);
    }
    let dt = t.elapsed();
    println!("classify: {:.1} us/query", dt.as_secs_f64() * 1e6 / n as f64);

    // HF energy alone
    let t = Instant::now();
    for i in 0..n {
        std::hint::black_box(high_frequency_energy(&imgs[i % imgs.len()]));
    }
    println!("hf_energy: {:.1} us", t.elapsed().as_secs_f64() * 1e6 / n as f64);

    // block mean alone
    let t = Instant::now();
    for i in 0..n {
        std::hint::black_box(median_block_mean(&imgs[i % imgs.len()]));
    }
    println!("block_mean: {:.1} us", t.elapsed().as_secs_f64() * 1e6 / n as f64);

    // forward pass alone (via a detector-off service)
    let mut p2 = OraclePolicy::default();
    p2.detector_enabled = false;
    p2.per_class = 8;
    p2.epochs = 2;
    let svc2 = OracleService::build(p2).unwrap();
    let sid2 = svc2.open_session();
    let t = Instant::now();
    for i in 0..n {
        let r = svc2.classify(sid2, &imgs[i % imgs.len()]);
        std::hint::black_box(&r);
    }
    println!("classify(no detector): {:.1} us/query", t.elapsed().as_secs_f64() * 1e6 / n as f64);
}
