//! Parse interaction and score CSVs, see a validation failure, then split
//! and mask.

use std::io::Cursor;

use dpmtl::ingest::{apply_sparsity_mask, parse_interactions, parse_scores, split_dataset, SplitSpec, SplitUnit};

const LOG: &str = "\
# options 2 5
user,item,chosen,correct,position
0,0,1,1,0
0,1,0,2,1
0,2,3,3,2
1,0,0,1,0
1,2,3,3,1
2,1,2,2,0
2,2,0,3,1
2,0,1,1,2
";

const SCORES: &str = "user,score\n0,612.5\n1,540\n2,701\n";

fn main() -> dpmtl::Result<()> {
    let d = parse_interactions(Cursor::new(LOG))?.with_scores(Some(parse_scores(Cursor::new(SCORES))?));
    println!(
        "{} users, {} items, options {:?}, sparsity {:.3}, correct rate {:.3}",
        d.num_users(),
        d.num_items(),
        d.options_per_item(),
        d.sparsity(),
        d.correct_rate()
    );
    println!("answer key {:?}", d.answer_key());

    let bad = "user,item,chosen,correct\n0,0,1,1\n1,0,0,2\n0,0,1,1\n";
    match parse_interactions(Cursor::new(bad)) {
        Ok(_) => println!("unexpectedly valid"),
        Err(e) => println!("rejected: {e}"),
    }

    let split = split_dataset(&d, &SplitSpec::new(0.6, 0.2, 0.2, SplitUnit::ByInteraction, 0)?)?;
    println!("split: {} / {} / {} interactions", split.train.len(), split.val.len(), split.test.len());
    let masked = apply_sparsity_mask(&d, 0.5, 0)?;
    println!("masked 50%: {} of {} interactions kept", masked.len(), d.len());
    Ok(())
}
