// Drives the command-line tool in-process: prepare raw captions and
// features, train text-only and multi-modal models, then evaluate, sample
// and inspect. Artifacts go to a temporary directory.
//
// ```text
// cargo run --example cli_pipeline
// ```

use std::fmt::Write as _;
use std::path::Path;

use mmlm::cli::run;
use mmlm::synthetic::two_grammar_corpus;

fn mmlm(args: &[&str]) -> mmlm::Result<String> {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("mmlm").chain(args.iter().copied()), &mut out, &mut err);
    if code != 0 {
        return Err(mmlm::Error::Usage(format!(
            "mmlm {} exited with {code}: {}",
            args.join(" "),
            String::from_utf8_lossy(&err)
        )));
    }
    Ok(String::from_utf8_lossy(&out).into_owned())
}

fn write_inputs(dir: &Path) -> mmlm::Result<()> {
    let corpus = two_grammar_corpus(6, 300, 8, 0.1, 0.3)?;
    let (mut captions, mut features) = (String::new(), String::new());
    for (i, r) in corpus.records.iter().enumerate() {
        // Carve a test split out of the held-out part.
        let split = match r.split {
            mmlm::data::Split::Train => "train",
            _ if i % 3 == 0 => "test",
            _ => "valid",
        };
        let _ = writeln!(captions, "{}\ten\t{split}\t{}.", r.image_id, r.tokens.join(" "));
    }
    for (id, v) in corpus.contexts.iter() {
        let values: Vec<String> = v.iter().map(f32::to_string).collect();
        let _ = writeln!(features, "{id}\t{}", values.join(" "));
    }
    let io = |e: std::io::Error| mmlm::Error::Config(e.to_string());
    std::fs::write(dir.join("raw.tsv"), captions).map_err(io)?;
    std::fs::write(dir.join("features.txt"), features).map_err(io)
}

pub fn run_example() -> mmlm::Result<String> {
    let dir = tempfile::tempdir().map_err(|e| mmlm::Error::Config(e.to_string()))?;
    let p = |name: &str| dir.path().join(name).display().to_string();
    write_inputs(dir.path())?;

    print!("{}", mmlm(&["prepare", "--captions", &p("raw.tsv"), "--features", &p("features.txt"), "--out", &p("data"), "--min-count", "1"])?);
    let (data, text_out, mm_out) = (p("data"), p("text"), p("mm"));
    let common = ["train", "--data", &data, "--hidden", "16", "--epochs", "3", "--unroll", "16", "--seed", "1"];
    print!("{}", mmlm(&[&common[..], &["--arch", "delta-rnn", "--out", &text_out]].concat())?);
    print!("{}", mmlm(&[&common[..], &["--arch", "lstm", "--fusion", "outer", "--out", &mm_out]].concat())?);

    let text_ckpt = p("text/best.ckpt");
    let mm_ckpt = p("mm/best.ckpt");
    let report = mmlm(&[
        "eval", "--checkpoint", &text_ckpt, "--checkpoint", &mm_ckpt,
        "--captions", &p("data/captions.tsv"), "--contexts", &p("data/contexts.mmcv"),
    ])?;
    print!("{report}");
    print!("{}", mmlm(&["sample", "--checkpoint", &mm_ckpt, "--contexts", &p("data/contexts.mmcv"), "--image", "img00000", "--null-context", "--max-len", "10", "--width", "3"])?);
    print!("{}", mmlm(&["neighbors", "--checkpoint", &text_ckpt, "-k", "3", "anoun1"])?);
    print!("{}", mmlm(&["inspect", &mm_ckpt])?);
    Ok(report)
}

#[allow(dead_code)]
fn main() -> mmlm::Result<()> {
    run_example().map(|_| ())
}
