"""Hand-counted IoU cases shared by the metric tests and the acceptance run.

Each case: (name, records, expected per-class IoU, expected mIoU, expected FB-IoU).
Records are (pred, gt, class_id) over small flat masks; counts are worked
out by hand in the comments.
"""

from fractions import Fraction as F

import numpy as np


def m(*bits):
    return np.array(bits, dtype=np.uint8).reshape(1, -1)


GOLDEN = [
    # tp=3 fp=0 fn=0 | bg: tp=1 fp=0 fn=0
    ("perfect", [(m(1, 1, 1, 0), m(1, 1, 1, 0), 1)], {1: F(1)}, F(1), F(1)),
    # tp=0 fp=2 fn=2 | bg tn=0 -> 0/(0+2+2)
    ("disjoint", [(m(1, 1, 0, 0), m(0, 0, 1, 1), 1)], {1: F(0)}, F(0), F(0)),
    # pred {1,2}, gt {2,3}: tp=1 fp=1 fn=1 | bg: tn=1 (pixel 0), bg-fp=fn=1, bg-fn=fp=1
    ("one_third", [(m(0, 1, 1, 0), m(0, 0, 1, 1), 1)], {1: F(1, 3)}, F(1, 3), F(1, 2) * (F(1, 3) + F(1, 3))),
    # empty prediction: tp=0 fp=0 fn=2 | bg: tn=2, fp_bg=2 -> 2/4
    ("empty_pred", [(m(0, 0, 0, 0), m(1, 1, 0, 0), 1)], {1: F(0)}, F(0), F(1, 2) * (0 + F(1, 2))),
    # superset: tp=2 fp=2 fn=0 | bg: tn=1 fn_bg=2 -> 1/3
    ("superset", [(m(1, 1, 1, 1, 0), m(0, 1, 1, 0, 0), 1)], {1: F(1, 2)}, F(1, 2), F(1, 2) * (F(1, 2) + F(1, 3))),
    # pooled counts, not per-image mean: (tp,fp,fn) = (1,0,1) + (2,1,0) = (3,1,1) -> 3/5
    # bg: rec1 tn=2 fp_bg=1 ; rec2 tn=0 fn_bg=1 -> 2/4
    ("pooled", [(m(1, 0, 0, 0), m(1, 1, 0, 0), 1), (m(1, 1, 1), m(1, 1, 0), 1)],
     {1: F(3, 5)}, F(3, 5), F(1, 2) * (F(3, 5) + F(1, 2))),
    # two classes: A tp=1 fp=1 fn=1 -> 1/3, B perfect tp=2 -> 1; mIoU 2/3
    # fg pooled (3,1,1) -> 3/5 ; bg: A tn=1,(1,1) ; B tn=2 -> 3/5
    ("two_classes", [(m(0, 1, 1, 0), m(0, 0, 1, 1), 7), (m(1, 1, 0, 0), m(1, 1, 0, 0), 9)],
     {7: F(1, 3), 9: F(1)}, F(2, 3), F(3, 5)),
    # class with no pixels anywhere is excluded from mIoU; only class 4 counts
    # class 3: all zero. class 4: tp=1 fp=0 fn=1 -> 1/2
    # fg (1,0,1) -> 1/2 ; bg: class3 tn=3 ; class4 tn=1, fp_bg=1 -> 4/5
    ("absent_class", [(m(0, 0, 0), m(0, 0, 0), 3), (m(1, 0, 0), m(1, 1, 0), 4)],
     {4: F(1, 2)}, F(1, 2), F(1, 2) * (F(1, 2) + F(4, 5))),
]
