// scratch fixture generator
use atf_core::zoo::synth_dataset;
use atf_oracle::wire::render_response;
use atf_oracle::{OraclePolicy, OracleService};

fn main() {
    let policy = OraclePolicy::default();
    let data = synth_dataset(policy.data_seed, policy.per_class);
    let svc = OracleService::build(policy).unwrap();
    let sid = svc.open_session();
    let img = &data.samples[0].image;
    let r1 = svc.classify(sid, img);
    println!("scored:   {}", render_response(&r1));
    // same image re-sent: 3 served total, the 4th trips the probe window
    let _ = svc.classify(sid, img);
    let _ = svc.classify(sid, img);
    let r4 = svc.classify(sid, img);
    println!("alert:    {}", render_response(&r4));
    println!("label[0]: {}", data.samples[0].label);
}
