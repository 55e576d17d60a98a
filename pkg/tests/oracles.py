"""Independent brute-force reference implementations used by the tests.

Everything here is deliberately written scalar-first (plain Python loops,
no vectorization tricks shared with the library) so the two code paths can
only agree because the underlying definitions agree.
"""

from __future__ import annotations

import math

import numpy as np


def boundary_band_oracle(polygons, image_size, thickness, stride):
    """Per-pixel point-to-segment scan, then block max-pool.

    Mirrors the definition: a full-resolution pixel center (x + 0.5, y + 0.5)
    is in the band iff its distance to some polygon edge is <= thickness / 2;
    an output cell is 1 iff any band pixel lands in its stride x stride block.
    The squared-distance comparison replicates the library's arithmetic
    step-for-step (same clip, same operation order) so agreement is exact,
    not approximate.
    """
    height, width = int(image_size[0]), int(image_size[1])
    radius = thickness / 2.0
    r2 = radius * radius
    edges = []
    for poly in polygons:
        pts = [(float(x), float(y)) for x, y in poly]
        n = len(pts)
        for k in range(n):
            edges.append((pts[k], pts[(k + 1) % n]))
    band = np.zeros((height, width), dtype=bool)
    for yi in range(height):
        py = yi + 0.5
        for xi in range(width):
            px = xi + 0.5
            for (ax, ay), (bx, by) in edges:
                ex = bx - ax
                ey = by - ay
                ee = ex * ex + ey * ey
                if ee == 0.0:
                    dx = px - ax
                    dy = py - ay
                else:
                    t = ((px - ax) * ex + (py - ay) * ey) / ee
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                    dx = px - (ax + t * ex)
                    dy = py - (ay + t * ey)
                if dx * dx + dy * dy <= r2:
                    band[yi, xi] = True
                    break
    grid_h = math.ceil(height / stride)
    grid_w = math.ceil(width / stride)
    out = np.zeros((grid_h, grid_w), dtype=np.uint8)
    for yi in range(height):
        for xi in range(width):
            if band[yi, xi]:
                out[yi // stride, xi // stride] = 1
    return out


def derive_labels_oracle(rects, image_size):
    """Literal per-pixel application of the taxonomy rules.

    Rasterizes every carton rectangle onto a padded canvas, finds contour
    cells morphologically (cells with an uncovered 4-neighbour), and checks
    each one against the contact rule (another carton within Chebyshev
    distance 1) and the edge rule (cell on the outermost image ring or
    outside the image).  Face completeness is read off the rasters: no cell
    outside the image and no cell covered by a later rectangle.
    """
    height, width = int(image_size[0]), int(image_size[1])
    rects = [tuple(int(v) for v in r) for r in rects]
    x_lo = min([0] + [r[0] for r in rects]) - 2
    y_lo = min([0] + [r[1] for r in rects]) - 2
    x_hi = max([width] + [r[2] for r in rects]) + 2
    y_hi = max([height] + [r[3] for r in rects]) + 2
    ch, cw = y_hi - y_lo, x_hi - x_lo
    canvases = []
    for x1, y1, x2, y2 in rects:
        canvas = np.zeros((ch, cw), dtype=bool)
        canvas[y1 - y_lo : y2 - y_lo, x1 - x_lo : x2 - x_lo] = True
        canvases.append(canvas)

    labels = []
    for i, (x1, y1, x2, y2) in enumerate(rects):
        mask = canvases[i]
        others = np.zeros((ch, cw), dtype=bool)
        for j, canvas in enumerate(canvases):
            if j != i:
                others |= canvas
        inner = True
        for cy in range(y1 - y_lo, y2 - y_lo):
            for cx in range(x1 - x_lo, x2 - x_lo):
                if (
                    mask[cy - 1, cx]
                    and mask[cy + 1, cx]
                    and mask[cy, cx - 1]
                    and mask[cy, cx + 1]
                ):
                    continue  # interior cell, not on the contour
                px = cx + x_lo
                py = cy + y_lo
                on_edge = px <= 0 or px >= width - 1 or py <= 0 or py >= height - 1
                contacted = others[cy - 1 : cy + 2, cx - 1 : cx + 2].any()
                if not (on_edge or contacted):
                    inner = False
                    break
            if not inner:
                break
        truncated = x1 < 0 or y1 < 0 or x2 > width or y2 > height
        occluded = any((canvases[j] & mask).any() for j in range(i + 1, len(rects)))
        part = "inner" if inner else "outer"
        state = "all" if not truncated and not occluded else "occlusion"
        labels.append(f"Carton-{part}-{state}")
    return labels


def iou_oracle(a, b):
    """Scalar IoU of two (x1, y1, x2, y2) boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def fd_gradients(fn, params, step=1e-6):
    """Central-difference gradients of a scalar ``fn()`` w.r.t. float64 tensors.

    ``fn`` must read the current contents of ``params`` (mutated in place).
    """
    grads = []
    for p in params:
        grad = np.zeros(p.numel())
        flat = p.reshape(-1)
        for k in range(flat.numel()):
            orig = float(flat.detach()[k])
            with_no_grad_write(flat, k, orig + step)
            up = float(fn().detach())
            with_no_grad_write(flat, k, orig - step)
            down = float(fn().detach())
            with_no_grad_write(flat, k, orig)
            grad[k] = (up - down) / (2.0 * step)
        grads.append(grad.reshape(tuple(p.shape)))
    return grads


def with_no_grad_write(flat_tensor, index, value):
    import torch

    with torch.no_grad():
        flat_tensor[index] = value


def autograd_gradients(fn, params):
    """Backward-pass gradients aligned with :func:`fd_gradients` output."""
    import torch

    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    out = []
    for p in params:
        if p.grad is None:
            out.append(np.zeros(tuple(p.shape)))
        else:
            out.append(p.grad.detach().numpy().copy())
    return out


def grad_rel_err(grads_a, grads_b):
    """Norm-based relative error between two gradient lists."""
    a = np.concatenate([np.asarray(g).ravel() for g in grads_a])
    b = np.concatenate([np.asarray(g).ravel() for g in grads_b])
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def average_precision_oracle(scored_flags, n_gt, thresholds=None):
    """AP via explicit 101-point interpolation from (score, is_tp) pairs.

    ``scored_flags`` is a list of (score, True/False) detections for one
    class at one IoU threshold, matching already resolved.  Returns the mean
    over the 101-point interpolated precision envelope.
    """
    if n_gt == 0:
        return None
    order = sorted(range(len(scored_flags)), key=lambda i: (-scored_flags[i][0], i))
    tp = 0
    fp = 0
    recalls = []
    precisions = []
    for i in order:
        if scored_flags[i][1]:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    total = 0.0
    for k in range(101):
        r = k / 100
        best = 0.0
        for rec, prec in zip(recalls, precisions):
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / 101


def _bucket_ok_oracle(area, bucket):
    if bucket is None:
        return True
    if bucket == "small":
        return area < 32.0**2
    if bucket == "medium":
        return 32.0**2 <= area <= 96.0**2
    return area > 96.0**2


def evaluate_oracle(detections_by_image, records, labels, thresholds, buckets=(None,)):
    """Brute-force evaluation protocol re-implementation with plain loops.

    ``detections_by_image`` maps image id to (x1, y1, x2, y2, class_idx,
    score) tuples; ``records`` are ImageRecord objects.  Returns
    ``{bucket: {threshold: mean-AP-over-classes or None}}``.  Matching:
    per image/class, descending score, best unmatched in-bucket gt with IoU
    >= threshold wins; detections overlapping only out-of-bucket gts at the
    threshold are dropped, as are unmatched detections whose own box area
    is out of bucket.
    """
    results = {}
    for bucket in buckets:
        per_threshold = {}
        for thr in thresholds:
            class_aps = []
            for ci, label in enumerate(labels):
                pooled = []
                n_gt = 0
                for rec in records:
                    gts = [
                        (inst.bbox.x_min, inst.bbox.y_min, inst.bbox.x_max, inst.bbox.y_max)
                        for inst in rec.instances
                        if inst.label == label
                    ]
                    ignore = [
                        not _bucket_ok_oracle((g[2] - g[0]) * (g[3] - g[1]), bucket)
                        for g in gts
                    ]
                    n_gt += sum(1 for ig in ignore if not ig)
                    dets = [
                        d for d in detections_by_image.get(rec.image_id, []) if d[4] == ci
                    ]
                    order = sorted(range(len(dets)), key=lambda i: (-dets[i][5], i))
                    used = [False] * len(gts)
                    for i in order:
                        box = dets[i][:4]
                        best = -1
                        best_iou = 0.0
                        for j, g in enumerate(gts):
                            if used[j] or ignore[j]:
                                continue
                            v = iou_oracle(box, g)
                            if v >= thr and v > 0 and v > best_iou:
                                best, best_iou = j, v
                        if best >= 0:
                            used[best] = True
                            pooled.append((dets[i][5], True))
                            continue
                        touches_ignored = False
                        for j, g in enumerate(gts):
                            if ignore[j]:
                                v = iou_oracle(box, g)
                                if v >= thr and v > 0:
                                    touches_ignored = True
                                    break
                        if touches_ignored:
                            continue
                        area = (box[2] - box[0]) * (box[3] - box[1])
                        if not _bucket_ok_oracle(area, bucket):
                            continue
                        pooled.append((dets[i][5], False))
                ap = average_precision_oracle(pooled, n_gt)
                if ap is not None:
                    class_aps.append(ap)
            per_threshold[thr] = sum(class_aps) / len(class_aps) if class_aps else None
        results[bucket] = per_threshold
    return results
