"""Shared setup for the experiment scripts: a synthetic class split into train/test plus its network."""

import dataclasses
import logging
import time
from dataclasses import dataclass, field

from vvn.geometry import augment_with_mirrors
from vvn.network import build_network, compress
from vvn.synth import SynthConfig, generate, get_model, split

log = logging.getLogger("experiments")


@dataclass
class Setup:
    model: str = "car"
    n_train: int = 200
    n_test: int = 25
    k: int = 30
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(seed=5))


def add_setup_args(ap, defaults: Setup = Setup()):
    ap.add_argument("--model", default=defaults.model)
    ap.add_argument("--n-train", type=int, default=defaults.n_train)
    ap.add_argument("--n-test", type=int, default=defaults.n_test)
    ap.add_argument("--k", type=int, default=defaults.k)
    ap.add_argument("--seed", type=int, default=defaults.synth.seed)
    ap.add_argument("--desc-noise", type=float, default=defaults.synth.descriptor_noise_sigma)
    ap.add_argument("--view-dependence", type=float, default=defaults.synth.view_dependence)


def setup_from_args(args) -> Setup:
    synth = dataclasses.replace(Setup().synth, seed=args.seed, descriptor_noise_sigma=args.desc_noise,
                                view_dependence=args.view_dependence,
                                n_instances=args.n_train + args.n_test)
    return Setup(args.model, args.n_train, args.n_test, args.k, synth)


def build(setup: Setup):
    """``(train, test, ground_truth, network, compressed)`` for ``setup``."""
    coll, gt = generate(get_model(setup.model), setup.synth)
    train, test = split(coll, setup.n_test)
    t0 = time.perf_counter()
    net = build_network(augment_with_mirrors(train), k=setup.k)
    comp = compress(net)
    log.info("network over %d instances, %d nodes, alpha %.4g, built in %.1fs",
             net.n_instances, net.n_nodes, net.alpha, time.perf_counter() - t0)
    return train, test, gt, net, comp
