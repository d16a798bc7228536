//! Reordering an item's options reorders its predictions and nothing
//! else: the models have no notion of option position.

use dpmtl::data::{Dataset, Interaction};
use dpmtl::models::{History, Model, ModelConfig, ModelFamily};

fn main() -> dpmtl::Result<()> {
    let rows = vec![
        Interaction::new(0, 0, 2, 0).with_position(0),
        Interaction::new(0, 1, 1, 1).with_position(1),
        Interaction::new(1, 0, 0, 0).with_position(0),
        Interaction::new(1, 1, 0, 1).with_position(1),
    ];
    let d = Dataset::new(2, 2, vec![3, 2], rows.clone(), None)?;
    // swap the first two options of item 0: (A, B, C) -> (B, A, C)
    let perm = [1, 0, 2];
    let swapped: Vec<Interaction> = rows
        .iter()
        .map(|x| {
            let mut y = *x;
            if x.item == 0 {
                y.chosen = perm[x.chosen];
                y.correct = perm[x.correct];
            }
            y
        })
        .collect();
    let d2 = Dataset::new(2, 2, vec![3, 2], swapped, None)?;
    for family in ModelFamily::ALL {
        let mut m = Model::new(ModelConfig::new(family, 4, 2), 2, &[3, 2], 11)?;
        let before = m.predict(&History::from_dataset(&d), &d.interactions()[..1])?;
        m.permute_item_options(0, &perm)?;
        let after = m.predict(&History::from_dataset(&d2), &d2.interactions()[..1])?;
        println!("{family}");
        println!("  original {:.4?}  P(correct) {:.4}", before[0].probs, before[0].correct_probability());
        println!("  swapped  {:.4?}  P(correct) {:.4}", after[0].probs, after[0].correct_probability());
    }
    Ok(())
}
