"""Random small networks with non-trivial BN state for property tests."""
import numpy as np

from depprune.graph import build_preact_resnet, build_vgg

VGG_SHAPES = [[4, 6], [3, "M", 5, 4], [6, 6, "M", 8, "M", 5]]


def randomize(graph, rng, beta_scale=0.5):
    for bn in graph.batchnorms():
        c = bn.channels
        bn.gamma.data[...] = rng.normal(size=c)
        bn.beta.data[...] = rng.normal(size=c) * beta_scale
        bn.running_mean[...] = rng.normal(size=c) * 0.2
        bn.running_var[...] = rng.uniform(0.5, 2.0, size=c)
    return graph.eval()


def random_graph(seed, resnet=None):
    """A small VGG (even seeds) or PreAct-ResNet (odd seeds) in eval mode."""
    rng = np.random.default_rng(seed)
    if resnet is None:
        resnet = seed % 2 == 1
    if resnet:
        g = build_preact_resnet([1, 1], num_classes=3, input_shape=(2, 6, 6), widths=(2, 3), expansion=2,
                                seed=seed)
    else:
        g = build_vgg(VGG_SHAPES[seed % len(VGG_SHAPES)], num_classes=3, input_shape=(2, 6, 6), seed=seed)
    return randomize(g, rng)
