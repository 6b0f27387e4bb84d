#include "maslora/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "maslora/errors.hpp"

namespace maslora {

namespace {

thread_local bool g_no_grad = false;

std::shared_ptr<NodeImpl> make_leaf(Mat m, bool requires_grad) {
    auto p = std::make_shared<NodeImpl>();
    p->grad = Mat::zeros(m.rows, m.cols);
    p->value = std::move(m);
    p->requires_grad = requires_grad;
    return p;
}

bool any_requires_grad(std::initializer_list<const Node*> ns) {
    for (const Node* n : ns) {
        if (n->impl->requires_grad) return true;
    }
    return false;
}

// Builds the result node; records lineage only when the result will
// take part in a backward pass.
Node make_op(Mat value, std::initializer_list<const Node*> parents,
             std::function<void(NodeImpl&)> backward_fn) {
    bool track = !g_no_grad && any_requires_grad(parents);
    auto p = std::make_shared<NodeImpl>();
    p->grad = Mat::zeros(value.rows, value.cols);
    p->value = std::move(value);
    p->requires_grad = track;
    if (track) {
        p->parents.reserve(parents.size());
        for (const Node* n : parents) p->parents.push_back(n->impl);
        p->backward_fn = std::move(backward_fn);
    }
    return Node(p);
}

void accum(NodeImpl& dst, const Mat& g) {
    if (dst.requires_grad) add_inplace(dst.grad, g);
}

}  // namespace

Node Node::param(Mat m) { return Node(make_leaf(std::move(m), true)); }
Node Node::constant(Mat m) { return Node(make_leaf(std::move(m), false)); }

void Node::zero_grad() {
    std::fill(impl->grad.data.begin(), impl->grad.data.end(), 0.0);
}

NoGradGuard::NoGradGuard() : prev_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = prev_; }
bool NoGradGuard::active() { return g_no_grad; }

Node matmul(const Node& a, const Node& b) {
    auto pa = a.impl;
    auto pb = b.impl;
    return make_op(matmul(pa->value, pb->value), {&a, &b}, [pa, pb](NodeImpl& self) {
        accum(*pa, matmul(self.grad, transpose(pb->value)));
        accum(*pb, matmul(transpose(pa->value), self.grad));
    });
}

Node add(const Node& a, const Node& b) {
    auto pa = a.impl;
    auto pb = b.impl;
    return make_op(add(pa->value, pb->value), {&a, &b}, [pa, pb](NodeImpl& self) {
        accum(*pa, self.grad);
        accum(*pb, self.grad);
    });
}

Node scale(const Node& a, double s) {
    auto pa = a.impl;
    return make_op(scale(pa->value, s), {&a}, [pa, s](NodeImpl& self) {
        accum(*pa, scale(self.grad, s));
    });
}

Node transpose(const Node& a) {
    auto pa = a.impl;
    return make_op(transpose(pa->value), {&a}, [pa](NodeImpl& self) {
        accum(*pa, transpose(self.grad));
    });
}

Node relu(const Node& a) {
    auto pa = a.impl;
    Mat out = pa->value;
    for (double& v : out.data) v = std::max(0.0, v);
    return make_op(std::move(out), {&a}, [pa](NodeImpl& self) {
        if (!pa->requires_grad) return;
        Mat g = self.grad;
        for (size_t i = 0; i < g.data.size(); ++i) {
            if (pa->value.data[i] <= 0.0) g.data[i] = 0.0;
        }
        add_inplace(pa->grad, g);
    });
}

Node softmax_rows(const Node& a) {
    auto pa = a.impl;
    return make_op(softmax_rows(pa->value), {&a}, [pa](NodeImpl& self) {
        if (!pa->requires_grad) return;
        const Mat& y = self.value;
        Mat g(y.rows, y.cols);
        for (int i = 0; i < y.rows; ++i) {
            double dot = 0.0;
            for (int j = 0; j < y.cols; ++j) dot += self.grad.at(i, j) * y.at(i, j);
            for (int j = 0; j < y.cols; ++j) {
                g.at(i, j) = y.at(i, j) * (self.grad.at(i, j) - dot);
            }
        }
        add_inplace(pa->grad, g);
    });
}

Node layer_norm(const Node& a, const Node& gain, const Node& bias, double eps) {
    auto px = a.impl;
    auto pg = gain.impl;
    auto pb = bias.impl;
    Mat out = layer_norm(px->value, pg->value, pb->value, eps);
    return make_op(std::move(out), {&a, &gain, &bias}, [px, pg, pb, eps](NodeImpl& self) {
        const Mat& x = px->value;
        int C = x.cols;
        Mat dgain = Mat::zeros(1, C);
        Mat dbias = Mat::zeros(1, C);
        Mat dx(x.rows, C);
        std::vector<double> xhat(static_cast<size_t>(C));
        for (int i = 0; i < x.rows; ++i) {
            double mean = 0.0;
            for (int j = 0; j < C; ++j) mean += x.at(i, j);
            mean /= C;
            double var = 0.0;
            for (int j = 0; j < C; ++j) {
                double d = x.at(i, j) - mean;
                var += d * d;
            }
            var /= C;
            double inv = 1.0 / std::sqrt(var + eps);
            double gsum = 0.0;
            double gxsum = 0.0;
            for (int j = 0; j < C; ++j) {
                xhat[j] = (x.at(i, j) - mean) * inv;
                double go = self.grad.at(i, j);
                dgain.at(0, j) += go * xhat[j];
                dbias.at(0, j) += go;
                double gh = go * pg->value.at(0, j);
                gsum += gh;
                gxsum += gh * xhat[j];
            }
            for (int j = 0; j < C; ++j) {
                double gh = self.grad.at(i, j) * pg->value.at(0, j);
                dx.at(i, j) = inv * (gh - gsum / C - xhat[j] * gxsum / C);
            }
        }
        accum(*px, dx);
        accum(*pg, dgain);
        accum(*pb, dbias);
    });
}

Node gather_rows(const Node& table, const std::vector<int>& ids) {
    auto pt = table.impl;
    const Mat& tv = pt->value;
    Mat out(static_cast<int>(ids.size()), tv.cols);
    for (size_t t = 0; t < ids.size(); ++t) {
        int r = ids[t];
        if (r < 0 || r >= tv.rows) {
            throw IndexError("gather_rows: row " + std::to_string(r) + " out of range for " +
                             tv.shape_str());
        }
        for (int j = 0; j < tv.cols; ++j) out.at(static_cast<int>(t), j) = tv.at(r, j);
    }
    return make_op(std::move(out), {&table}, [pt, ids](NodeImpl& self) {
        if (!pt->requires_grad) return;
        for (size_t t = 0; t < ids.size(); ++t) {
            for (int j = 0; j < pt->grad.cols; ++j) {
                pt->grad.at(ids[t], j) += self.grad.at(static_cast<int>(t), j);
            }
        }
    });
}

Node slice_cols(const Node& a, int c0, int c1) {
    auto pa = a.impl;
    const Mat& v = pa->value;
    if (c0 < 0 || c1 > v.cols || c0 >= c1) {
        throw IndexError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") invalid for " + v.shape_str());
    }
    Mat out(v.rows, c1 - c0);
    for (int i = 0; i < v.rows; ++i) {
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = v.at(i, j);
    }
    return make_op(std::move(out), {&a}, [pa, c0, c1](NodeImpl& self) {
        if (!pa->requires_grad) return;
        for (int i = 0; i < self.grad.rows; ++i) {
            for (int j = c0; j < c1; ++j) {
                pa->grad.at(i, j) += self.grad.at(i, j - c0);
            }
        }
    });
}

Node concat_cols(const std::vector<Node>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    int rows = parts[0].value().rows;
    int cols = 0;
    for (const Node& p : parts) {
        if (p.value().rows != rows) {
            throw ShapeError("concat_cols: row mismatch, " + parts[0].value().shape_str() +
                             " vs " + p.value().shape_str());
        }
        cols += p.value().cols;
    }
    Mat out(rows, cols);
    int off = 0;
    for (const Node& p : parts) {
        const Mat& v = p.value();
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < v.cols; ++j) out.at(i, off + j) = v.at(i, j);
        }
        off += v.cols;
    }

    bool track = false;
    for (const Node& p : parts) track = track || p.impl->requires_grad;
    auto res = std::make_shared<NodeImpl>();
    res->grad = Mat::zeros(out.rows, out.cols);
    res->value = std::move(out);
    res->requires_grad = track && !NoGradGuard::active();
    if (res->requires_grad) {
        std::vector<std::shared_ptr<NodeImpl>> ps;
        std::vector<int> widths;
        for (const Node& p : parts) {
            ps.push_back(p.impl);
            widths.push_back(p.value().cols);
        }
        res->parents = ps;
        res->backward_fn = [ps, widths](NodeImpl& self) {
            int off2 = 0;
            for (size_t k = 0; k < ps.size(); ++k) {
                if (ps[k]->requires_grad) {
                    for (int i = 0; i < self.grad.rows; ++i) {
                        for (int j = 0; j < widths[k]; ++j) {
                            ps[k]->grad.at(i, j) += self.grad.at(i, off2 + j);
                        }
                    }
                }
                off2 += widths[k];
            }
        };
    }
    return Node(res);
}

Node cross_entropy(const Node& logits, const std::vector<int>& targets, int pad_id) {
    auto pl = logits.impl;
    double loss = cross_entropy(pl->value, targets, pad_id);
    return make_op(Mat(1, 1, {loss}), {&logits}, [pl, targets, pad_id](NodeImpl& self) {
        if (!pl->requires_grad) return;
        int n = 0;
        for (int t : targets) {
            if (t != pad_id) ++n;
        }
        if (n == 0) return;
        double u = self.grad.at(0, 0) / n;
        Mat probs = softmax_rows(pl->value);
        for (int t = 0; t < probs.rows; ++t) {
            if (targets[t] == pad_id) continue;
            for (int j = 0; j < probs.cols; ++j) {
                double ind = (j == targets[t]) ? 1.0 : 0.0;
                pl->grad.at(t, j) += u * (probs.at(t, j) - ind);
            }
        }
    });
}

Node sum_all(const Node& a) {
    auto pa = a.impl;
    double s = 0.0;
    for (double v : pa->value.data) s += v;
    return make_op(Mat(1, 1, {s}), {&a}, [pa](NodeImpl& self) {
        if (!pa->requires_grad) return;
        double u = self.grad.at(0, 0);
        for (double& g : pa->grad.data) g += u;
    });
}

void backward(const Node& loss) {
    if (!loss.defined()) throw ShapeError("backward: undefined loss node");
    if (loss.value().rows != 1 || loss.value().cols != 1) {
        throw ShapeError("backward: loss must be 1x1, got " + loss.value().shape_str());
    }
    loss.impl->grad.at(0, 0) += 1.0;

    // Iterative postorder DFS: parents land before dependents, so the
    // reversed list runs loss-first.
    std::vector<NodeImpl*> order;
    std::unordered_set<NodeImpl*> seen;
    struct Frame {
        NodeImpl* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    if (seen.insert(loss.impl.get()).second) stack.push_back({loss.impl.get(), 0});
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            NodeImpl* p = f.node->parents[f.next_parent++].get();
            if (seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

}  // namespace maslora
