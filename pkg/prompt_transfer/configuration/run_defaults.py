run_defaults = {
    "seed": 0,
    "seeds": (0, 1, 2),
    # frozen backbone
    "vocab_size": 20,
    "d_model": 64,
    "n_heads": 4,
    "enc_layers": 1,
    "dec_layers": 1,
    "ff_dim": 128,
    "max_src_len": 16,
    "max_tgt_len": 16,
    "max_prompt_len": 128,
    "init_scheme": "scaled",
    # only read by init_scheme = gaussian
    "init_std": 0.02,
    # synthetic suite
    "source_tasks": ("copy:copy", "reverse:reverse", "map_sub_a:map-substitute", "parity:classify-parity"),
    "target_tasks": ("sort:sort", "map_sub_b:map-substitute"),
    "min_len": 3,
    "max_len": 8,
    "train_size": 2000,
    "dev_size": 200,
    "test_size": 200,
    # prompts; full-size runs use l=100
    "prompt_len": 8,
    "factor_noise_std": 0.01,
    # objective
    "lambda": 0.9,
    "temperature": 2.0,
    "distillation": True,
    "use_logits_kl": True,
    "use_hidden_mse": True,
    "prompt_distance": False,
    # optimisation
    "optimizer": "sgd",
    "adam_beta1": 0.9,
    "adam_beta2": 0.95,
    "adam_eps": 1e-6,
    "lr_teacher": 0.3,
    "lr_shared": 0.3,
    "lr_specific_source": 0.3,
    "lr_specific_target": 0.4,
    "batch_size": 16,
    "teacher_epochs": 30,
    "source_epochs": 20,
    "target_epochs": 30,
    "use_heuristics": False,
    # These settings will be used if it's use_heuristics=True
    "desk_epoch_scale": 1.5,
    "mixing_cap": 2 ** 15,
    # ablations
    "decomposition": True,
    "stochastic_sampling": True,
    "freeze_shared": False,
    "freeze_specific": False,
    "few_shot_ks": (4, 16, 32),
    "few_shot_draws": 10,
    "few_shot_target": "sort",
    "prompt_len_sweep": (4, 8, 16),
    "eval_split": "test",
}
