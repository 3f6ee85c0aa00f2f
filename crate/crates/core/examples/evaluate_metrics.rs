//! Accuracy, per-class IoU and mean IoU of a prediction stream.

use brepmae::evalkit::EvalReport;

fn main() -> brepmae::Result<()> {
    let labels = [0, 0, 0, 1, 1, 2, 2, 2, 0, 1];
    let preds = [0, 0, 1, 1, 1, 2, 0, 2, 0, 3];
    let report = EvalReport::from_predictions(&preds, &labels, 5)?;
    print!("{}", report.table());
    println!("{}", report.to_json());
    Ok(())
}
