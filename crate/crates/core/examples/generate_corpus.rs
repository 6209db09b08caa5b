//! Generate a synthetic corpus and write it as a manifest plus JSONL files.
//!
//! ```text
//! cargo run --example generate_corpus -- out/corpus yelp 40 200
//! ```

use std::path::PathBuf;

use agentrec::environment::{generate_corpus, CorpusGenConfig};
use agentrec::Domain;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("target/example-corpus", String::as_str));
    let domain: Domain = serde_json::from_value(serde_json::json!(args.get(1).map_or("yelp", String::as_str)))?;
    let n_users = args.get(2).map_or(Ok(40), |s| s.parse())?;
    let n_items = args.get(3).map_or(Ok(200), |s| s.parse())?;
    let max_hist = args.get(4).map_or(Ok(25), |s| s.parse())?;
    let min_hist = args.get(5).map_or(Ok(3), |s| s.parse())?;

    let cfg = CorpusGenConfig {
        domain,
        n_users,
        n_items,
        history_len: (min_hist, max_hist),
        ..CorpusGenConfig::default()
    };
    let corpus = generate_corpus(&cfg, 17)?;
    std::fs::create_dir_all(&out)?;
    corpus.save(&out)?;
    println!(
        "{} corpus: {} users, {} items, {} interactions, {} reviews -> {}",
        domain.as_str(),
        corpus.n_users(),
        corpus.n_items(),
        corpus.interactions().len(),
        corpus.reviews().len(),
        out.display()
    );
    Ok(())
}
