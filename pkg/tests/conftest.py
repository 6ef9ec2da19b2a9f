"""Session fixtures that train the desk-scale experiment models once.

Setting HCNAF_TEST_CACHE to a directory caches trained checkpoints between
pytest runs (a development convenience; leave it unset for an honest
from-scratch run)."""

import json
import os
import time

import pytest

from hcnaf.experiments import drivers
from hcnaf.training import load_checkpoint, save_checkpoint, train


def _cache_dir():
    return os.environ.get("HCNAF_TEST_CACHE", "")


def _train_with_timing(cfg):
    data = drivers.build_dataset(cfg)
    model = drivers.build_model(cfg)
    t0 = time.time()
    result = train(model, data, drivers.train_config(cfg))
    minutes = (time.time() - t0) / 60.0
    return model, result, minutes


def _cached_run(tag, cfg):
    cache = _cache_dir()
    if cache:
        os.makedirs(cache, exist_ok=True)
        ckpt = os.path.join(cache, f"{tag}.hcnaf")
        meta_path = os.path.join(cache, f"{tag}.json")
        key = json.dumps(cfg, sort_keys=True)
        if os.path.exists(ckpt) and os.path.exists(meta_path):
            with open(meta_path) as fh:
                meta = json.load(fh)
            if meta.get("key") == key:
                params, _ = load_checkpoint(ckpt)
                model = drivers.build_model(cfg)
                model.set_parameters(params)
                return model, meta["minutes"], meta["best_val"]
    model, result, minutes = _train_with_timing(cfg)
    if cache:
        save_checkpoint(ckpt, model.parameters(), {"tag": tag})
        with open(meta_path, "w") as fh:
            json.dump({"key": key, "minutes": minutes, "best_val": result.best_val}, fh)
    return model, minutes, result.best_val


@pytest.fixture(scope="session")
def toy1_artifacts():
    cfg = drivers.default_config("toy1")
    model, minutes, best_val = _cached_run("toy1", cfg)
    cfg_b = drivers.default_config("toy1")
    cfg_b["model.kind"] = "affine"
    baseline, minutes_b, _ = _cached_run("toy1_affine", cfg_b)
    return {
        "cfg": cfg,
        "model": model,
        "baseline": baseline,
        "minutes": minutes + minutes_b,
        "best_val": best_val,
    }


@pytest.fixture(scope="session")
def toy2_artifacts():
    cfg = drivers.default_config("toy2")
    model, minutes, best_val = _cached_run("toy2", cfg)
    return {"cfg": cfg, "model": model, "minutes": minutes, "best_val": best_val}


@pytest.fixture(scope="session")
def toypom_artifacts():
    cfg = drivers.default_config("toypom")
    model, minutes, best_val = _cached_run("toypom", cfg)
    return {"cfg": cfg, "model": model, "minutes": minutes, "best_val": best_val}


@pytest.fixture(scope="session")
def digits_artifacts():
    cfg = drivers.default_config("digits")
    model, minutes, best_val = _cached_run("digits", cfg)
    return {"cfg": cfg, "model": model, "minutes": minutes, "best_val": best_val}
