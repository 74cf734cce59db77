from .crowd_density import (
    CrowdDensity,
    EvalRecord,
    bg_ratio,
    evaluate,
    evaluate_sample,
    mae,
    metric_inputs,
    psnr,
    rmse,
    ssim_index,
    summarize,
    write_results,
)
