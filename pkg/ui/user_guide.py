"""
In-app User Guide dialog for the PMP viewer.
"""

from PySide6.QtWidgets import QDialog, QVBoxLayout, QTextBrowser, QPushButton, QHBoxLayout

from core.utils import LOG_FILE


def _build_guide_html() -> str:
    html = f"""
    <h2 style="color:#1976D2;">PMP Viewer User Guide</h2>
    <p>The viewer opens the files written by the <code>pmp</code> command-line tool.
    It never modifies them.</p>

    <h3>Training</h3>
    <p>Open the <code>.metrics.jsonl</code> file written next to a checkpoint. Rows with phase
    <b>warmup</b> come from EarlyBird mask discovery and carry the IoU between consecutive
    candidate masks; rows with phase <b>train</b> are the main updates.</p>

    <h3>Landscape</h3>
    <p>Open the CSV from <code>pmp probe-landscape</code>. Each row is one step size alpha with the
    mean loss along mask-confined directions and along unrestricted directions. The summary line
    reports the loss increase at alpha = &plusmn;0.1.</p>

    <h3>Gradients</h3>
    <p>Open the JSON from <code>pmp grad-dist</code>. Bins are log-spaced; the overlap coefficient
    is 1 when masked and frozen coordinates have identical gradient magnitude distributions.</p>

    <h3>Theory</h3>
    <p>Runs the quadratic-model check in the background. A step along the full gradient from the
    conditional optimum must raise the loss by at least &frac12;&lambda;E&#8214;g<sub>frozen</sub>&#8214;&sup2;&eta;&sup2;.
    The contrast compares it with a step that stays inside the mask.</p>

    <h3>Typical workflow</h3>
    <table border="1" cellpadding="6" cellspacing="0">
      <tr><th>Step</th><th>Command</th></tr>
      <tr><td>Pre-train with a private mask</td>
          <td><code>pmp pretrain --pmp --rho 0.7 --preset desk --out run/pmp.ckpt</code></td></tr>
      <tr><td>Try to fine-tune without the mask</td>
          <td><code>pmp finetune --checkpoint run/pmp.ckpt --mode unauthorized --out run/ft.json</code></td></tr>
      <tr><td>Fine-tune with the mask</td>
          <td><code>pmp finetune --checkpoint run/pmp.ckpt --mode authorized --mask run/pmp.mask --out run/auth.json</code></td></tr>
      <tr><td>Probe the landscape</td>
          <td><code>pmp probe-landscape --checkpoint run/pmp.ckpt --mask run/pmp.mask --out run/probe.csv</code></td></tr>
    </table>

    <hr>
    <p style="color:gray; font-size:small;">Log file: {LOG_FILE}</p>
    """
    return html


class UserGuideDialog(QDialog):
    def __init__(self, parent=None):
        super().__init__(parent)
        self.setWindowTitle("User Guide - PMP Viewer")
        self.setMinimumSize(650, 520)
        self.resize(720, 580)

        layout = QVBoxLayout(self)

        browser = QTextBrowser()
        browser.setOpenExternalLinks(False)
        browser.setHtml(_build_guide_html())
        layout.addWidget(browser)

        btn_row = QHBoxLayout()
        btn_row.addStretch()
        btn_close = QPushButton("Close")
        btn_close.clicked.connect(self.accept)
        btn_row.addWidget(btn_close)
        layout.addLayout(btn_row)
