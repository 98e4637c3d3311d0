import sys
sys.path.insert(0, "src")
import numpy as np
from smcvi import autodiff as ad

t = ad.Tape()
x = t.parameter(3.0)
y = x * x
print("f(x)=x^2 at 3:", y.value, ad.backward(t, y))

t = ad.Tape()
x = t.parameter(2.0)
y = t.parameter(1.0)
f = x * y + ad.log(y)
print("grads:", ad.backward(t, f))

t = ad.Tape()
x = t.parameter(2.0)
g = ad.stop_gradient(x) * x
print("stopgrad:", g.value, ad.backward(t, g))

v = ad.logsumexp([1000.0, -1000.0])
print("lse overflow:", v)

t = ad.Tape()
r = ad.record("log", [1.0], tape=t)
print("record log const:", r.value, t.kinds, t.partials)

t = ad.Tape()
a = t.parameter(np.array([1.0, 2.0, 3.0]))
s = ad.logsumexp(a)
print("lse last:", s.value)
print("grad:", ad.backward(t, s))

t = ad.Tape()
th = t.parameter(0.5)
col = th * np.array([1.0, 2.0, 3.0])
g2 = ad.gather(col, np.array([2, 2, 0]))
out = ad.asum(g2 * g2)
print("gather/asum:", out.value, ad.backward(t, out))
# check vs hand: col = .5*[1,2,3]; g2 = [1.5,1.5,.5]; out = 2*2.25*? -> 1.5^2+1.5^2+0.25 = 4.75
# d/dth: sum 2*g2*dg2/dth with dg2/dth=[3,3,1] -> 2*(1.5*3+1.5*3+0.5*1)=2*9.5=19
print("replay equal:", all(np.array_equal(np.asarray(u), np.asarray(v)) for u, v in zip(t.replay(), t.values)))
