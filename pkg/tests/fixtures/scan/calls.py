import numpy as np
import os.path
from scipy.stats import norm as gaussian
from math import *


def score(values):
    total = np.sum(values)
    return gaussian.pdf(total) + os.path.join("a", "b").count("/")


class Model(object):
    def fit(self, x):
        return self.transform(x)


print(score([1, 2]))
Model().fit(3)
