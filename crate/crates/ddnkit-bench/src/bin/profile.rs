//! Phase timing for one desk-scale training step. Not a benchmark — a
//! quick instrument for finding where step time goes.

use std::time::Instant;

use ddnkit::ads::total_loss;
use ddnkit::objsize::MaskImage;
use ddnkit::tensor::{Mode, Shape, TensorData};
use ddnkit::training::{dice_loss, mask_to_target};
use ddnkit_bench::{batch_input, desk_graph, rng};

fn main() {
    let mut g = desk_graph(7);
    let input = batch_input(4, 64, 3);
    let mask = MaskImage::filled(64, 64, 1);
    let target1 = mask_to_target(&mask, 1).unwrap();
    let mut target = TensorData::zeros(Shape::new(4, 1, 64, 64));
    for i in 0..4 {
        target.data[i * 4096..(i + 1) * 4096].copy_from_slice(&target1.data);
    }

    for round in 0..5 {
        let mut drng = rng(5);
        let t0 = Instant::now();
        let mut pass = g.forward(&input, Mode::Train, &mut drng).unwrap();
        let t_fwd = t0.elapsed();

        let t1 = Instant::now();
        let main = dice_loss(&mut pass.tape, pass.output, &target).unwrap();
        let total = total_loss(
            &mut pass.tape,
            main,
            None,
            pass.registrar.conv_weight_nodes(),
            1e-4,
        )
        .unwrap();
        let t_loss = t1.elapsed();

        let t2 = Instant::now();
        pass.tape.backward(total).unwrap();
        let t_bwd = t2.elapsed();

        let t3 = Instant::now();
        g.collect_grads(&pass.tape, &pass.registrar);
        let t_col = t3.elapsed();

        println!(
            "round {round}: forward {:6.1} ms | loss {:5.1} ms | backward {:6.1} ms | collect {:5.1} ms",
            t_fwd.as_secs_f64() * 1e3,
            t_loss.as_secs_f64() * 1e3,
            t_bwd.as_secs_f64() * 1e3,
            t_col.as_secs_f64() * 1e3,
        );
    }
}
