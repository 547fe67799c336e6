import platform
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from PySide6.QtCore import Qt, QThread, Signal, QSettings
from PySide6.QtGui import QFont
from PySide6.QtWidgets import (
    QApplication, QWidget, QMainWindow, QTabWidget, QVBoxLayout, QHBoxLayout, QLabel, QPushButton,
    QProgressBar, QTableWidget, QTableWidgetItem, QHeaderView, QTextEdit, QMessageBox, QGroupBox,
    QFormLayout, QSpinBox, QDoubleSpinBox, QFileDialog,
)

from core import formats
from core.analysis import QuadraticModel, masked_step_contrast, verify_prop1
from core.config import THEORY_PRESETS
from core.errors import PMPError
from core.platform_utils import get_default_font, open_in_file_manager, open_text_file
from core.utils import get_logger, LOG_FILE

logger = get_logger("PMP.ui")

STYLE = """
    QLabel { font-size: 14px; }
    QPushButton { padding: 6px 14px; font-size: 14px; font-weight: 500; }
    QTableWidget { font-size: 13px; }
    QHeaderView::section { font-size: 13px; font-weight: bold; padding: 6px; }
    QTabBar::tab { font-size: 14px; font-weight: bold; padding: 8px 16px; }
    QTextEdit { font-size: 13px; }
    QGroupBox { font-size: 14px; font-weight: bold; }
    QGroupBox::title { color: #1976D2; }
    QProgressBar { font-size: 13px; min-height: 20px; }
"""


# -------------------------
# Workers
# -------------------------
class TheoryWorker(QThread):
    progress = Signal(int)
    log = Signal(str)
    done = Signal(dict)
    failed = Signal(str)

    def __init__(self, params: Dict[str, Any]):
        super().__init__()
        self.params = dict(params)

    def run(self):
        p = dict(self.params)
        eta, n, seed = p.pop("eta"), p.pop("n_samples"), p.pop("seed")
        try:
            quad = QuadraticModel(**p).validate()
            self.log.emit(f"Quadratic model: d_M={quad.d_M} d_Mbar={quad.d_Mbar} eps={quad.eps_flat} "
                          f"lambda={quad.lambda_curv} sigma={quad.noise_sigma}")
            self.progress.emit(10)
            prop1 = verify_prop1(quad, eta, n, seed)
            self.progress.emit(55)
            contrast = masked_step_contrast(quad, eta, n, seed)
            self.progress.emit(100)
        except PMPError as e:
            logger.warning(f"THEORY_FAILED: {e}")
            self.failed.emit(str(e))
            return
        self.done.emit({"prop1": prop1.to_dict(), "contrast": contrast.to_dict()})


# -------------------------
# Main Window
# -------------------------
class MainWindow(QMainWindow):
    def __init__(self, start_dir: Optional[str] = None):
        super().__init__()
        self.setWindowTitle("PMP Viewer - Private Mask Pre-Training")
        self.resize(1100, 720)

        self.settings = QSettings("PMP", "PMP")
        self.start_dir = start_dir or self.settings.value("viewer/last_dir", str(Path.cwd()), type=str)
        self.theory_worker: Optional[TheoryWorker] = None

        tabs = QTabWidget()
        tabs.addTab(self._build_training_tab(), "Training")
        tabs.addTab(self._build_landscape_tab(), "Landscape")
        tabs.addTab(self._build_gradients_tab(), "Gradients")
        tabs.addTab(self._build_theory_tab(), "Theory")

        self.setCentralWidget(tabs)
        self._build_menu_bar()
        self.statusBar().showMessage(f"Artifacts: {self.start_dir}  |  OS: {platform.system()} {platform.release()}")
        self._load_settings()

    # -------------------------
    # Settings
    # -------------------------
    def _load_settings(self):
        width = self.settings.value("window/width", 1100, type=int)
        height = self.settings.value("window/height", 720, type=int)
        self.resize(width, height)
        for key, box in self._theory_inputs.items():
            default = THEORY_PRESETS["prop1-default"][key]
            value = self.settings.value(f"theory/{key}", default, type=type(default))
            box.setValue(value)

    def _save_settings(self):
        self.settings.setValue("viewer/last_dir", self.start_dir)
        self.settings.setValue("window/width", self.width())
        self.settings.setValue("window/height", self.height())
        for key, box in self._theory_inputs.items():
            self.settings.setValue(f"theory/{key}", box.value())

    def closeEvent(self, event):
        self._save_settings()
        super().closeEvent(event)

    def _build_menu_bar(self):
        menu_bar = self.menuBar()
        help_menu = menu_bar.addMenu("Help")

        guide_action = help_menu.addAction("User Guide")
        guide_action.triggered.connect(self._show_user_guide)

        help_menu.addSeparator()

        about_action = help_menu.addAction("About PMP Viewer")
        about_action.triggered.connect(self._show_about)

        log_action = help_menu.addAction("Open Log File")
        log_action.triggered.connect(self._open_log_file)

        log_folder_action = help_menu.addAction("Open Log Folder")
        log_folder_action.triggered.connect(lambda: open_in_file_manager(str(LOG_FILE.parent)))

    def _show_user_guide(self):
        from ui.user_guide import UserGuideDialog
        dlg = UserGuideDialog(parent=self)
        dlg.exec()

    def _show_about(self):
        QMessageBox.about(
            self, "About PMP Viewer",
            "<h3>PMP Viewer</h3>"
            "<p>Inspects the artifacts of private mask pre-training runs.</p>"
            "<ul>"
            "<li><b>Training</b> - metrics log and EarlyBird IoU history</li>"
            "<li><b>Landscape</b> - 1D loss interpolation along masked and full directions</li>"
            "<li><b>Gradients</b> - gradient magnitude histograms split by the mask</li>"
            "<li><b>Theory</b> - Monte Carlo check of the destabilization bound</li>"
            "</ul>"
            f"<p><small>Log file: {LOG_FILE}</small></p>"
        )

    def _open_log_file(self):
        if LOG_FILE.exists():
            open_text_file(str(LOG_FILE))
        else:
            QMessageBox.information(self, "No log yet", f"Log file does not exist yet:\n{LOG_FILE}")

    def _pick_file(self, title: str, pattern: str) -> Optional[str]:
        path, _ = QFileDialog.getOpenFileName(self, title, self.start_dir, pattern)
        if path:
            self.start_dir = str(Path(path).parent)
        return path or None

    @staticmethod
    def _new_table(headers: List[str]) -> QTableWidget:
        table = QTableWidget(0, len(headers))
        table.setHorizontalHeaderLabels(headers)
        table.horizontalHeader().setSectionResizeMode(QHeaderView.Stretch)
        table.setAlternatingRowColors(True)
        table.setEditTriggers(QTableWidget.NoEditTriggers)
        return table

    @staticmethod
    def _fill_table(table: QTableWidget, rows: List[List[str]]):
        table.setRowCount(0)
        for row in rows:
            r = table.rowCount()
            table.insertRow(r)
            for c, text in enumerate(row):
                it = QTableWidgetItem(text)
                it.setTextAlignment(Qt.AlignRight | Qt.AlignVCenter)
                table.setItem(r, c, it)

    # -------------------------
    # Training Tab
    # -------------------------
    def _build_training_tab(self) -> QWidget:
        w = QWidget()
        layout = QVBoxLayout(w)

        dash = QGroupBox("Run")
        dash_l = QHBoxLayout(dash)
        self.lbl_train_summary = QLabel("No metrics loaded.")
        self.lbl_train_summary.setStyleSheet("font-weight: 600;")
        dash_l.addWidget(self.lbl_train_summary)
        layout.addWidget(dash)

        btn_row = QHBoxLayout()
        btn_open = QPushButton("Open Metrics...")
        btn_open.clicked.connect(self._open_metrics)
        btn_row.addWidget(btn_open)
        btn_row.addStretch()
        layout.addLayout(btn_row)

        self.metrics_table = self._new_table(["Phase", "Step", "Loss", "LR", "Grad norm", "IoU"])
        layout.addWidget(self.metrics_table)
        return w

    def _open_metrics(self):
        path = self._pick_file("Open metrics log", "Metrics (*.jsonl);;All files (*)")
        if not path:
            return
        try:
            records = formats.read_metrics(path)
        except PMPError as e:
            QMessageBox.warning(self, "Cannot load metrics", str(e))
            return
        self.load_metrics(records)

    def load_metrics(self, records: List[Dict[str, Any]]):
        rows = [[str(r.get("phase", "")), str(r.get("step", "")), f"{r.get('loss', float('nan')):.4f}",
                 f"{r.get('lr', 0.0):.2e}", f"{r.get('grad_norm', 0.0):.4f}",
                 f"{r['iou']:.4f}" if "iou" in r else ""] for r in records]
        self._fill_table(self.metrics_table, rows)
        s = formats.summarize_metrics(records)
        parts = [f"{s['records']} record(s)"]
        parts += [f"{phase}: {n}" for phase, n in sorted(s["phases"].items())]
        if s["final_loss"] is not None:
            parts.append(f"loss {s['first_loss']:.4f} -> {s['final_loss']:.4f}")
        if s["last_iou"] is not None:
            parts.append(f"last IoU {s['last_iou']:.4f}")
        self.lbl_train_summary.setText("  |  ".join(parts))

    # -------------------------
    # Landscape Tab
    # -------------------------
    def _build_landscape_tab(self) -> QWidget:
        w = QWidget()
        layout = QVBoxLayout(w)

        self.lbl_landscape = QLabel("No probe loaded.")
        self.lbl_landscape.setStyleSheet("font-weight: 600;")
        layout.addWidget(self.lbl_landscape)

        btn_row = QHBoxLayout()
        btn_open = QPushButton("Open Probe CSV...")
        btn_open.clicked.connect(self._open_landscape)
        btn_row.addWidget(btn_open)
        btn_row.addStretch()
        layout.addLayout(btn_row)

        self.landscape_table = self._new_table(["Alpha", "Loss (masked dir)", "Loss (full dir)"])
        layout.addWidget(self.landscape_table)
        return w

    def _open_landscape(self):
        path = self._pick_file("Open landscape probe", "CSV (*.csv);;All files (*)")
        if not path:
            return
        try:
            rows = formats.read_landscape_csv(path)
        except PMPError as e:
            QMessageBox.warning(self, "Cannot load probe", str(e))
            return
        self.load_landscape(rows)

    def load_landscape(self, rows):
        self._fill_table(self.landscape_table, [[f"{a:+.3f}", f"{m:.5f}", f"{f:.5f}"] for a, m, f in rows])
        s = formats.summarize_landscape(rows)
        if s["full_increase"] is None:
            self.lbl_landscape.setText(f"{len(rows)} point(s); alpha=+/-0.1 not on the grid")
            return
        self.lbl_landscape.setText(
            f"Base loss {s['base']:.4f}  |  increase at +/-0.1: masked {s['masked_increase']:+.5f}, "
            f"full {s['full_increase']:+.5f}"
        )

    # -------------------------
    # Gradients Tab
    # -------------------------
    def _build_gradients_tab(self) -> QWidget:
        w = QWidget()
        layout = QVBoxLayout(w)

        self.lbl_grad = QLabel("No distribution loaded.")
        self.lbl_grad.setStyleSheet("font-weight: 600;")
        layout.addWidget(self.lbl_grad)

        btn_row = QHBoxLayout()
        btn_open = QPushButton("Open Grad-Dist JSON...")
        btn_open.clicked.connect(self._open_grad_dist)
        btn_row.addWidget(btn_open)
        btn_row.addStretch()
        layout.addLayout(btn_row)

        self.grad_table = self._new_table(["Bin low", "Bin high", "Masked", "Frozen"])
        layout.addWidget(self.grad_table)
        return w

    def _open_grad_dist(self):
        path = self._pick_file("Open gradient distribution", "JSON (*.json);;All files (*)")
        if not path:
            return
        try:
            report = formats.read_json(path)
        except PMPError as e:
            QMessageBox.warning(self, "Cannot load report", str(e))
            return
        self.load_grad_dist(report)

    def load_grad_dist(self, report: Dict[str, Any]):
        edges = report.get("edges", [])
        hm, hu = report.get("hist_masked", []), report.get("hist_unmasked", [])
        rows = [[f"{edges[i]:.2e}", f"{edges[i + 1]:.2e}", str(hm[i]), str(hu[i])] for i in range(len(hm))]
        self._fill_table(self.grad_table, rows)
        self.lbl_grad.setText(
            f"Masked: {report.get('n_masked', 0)}  |  Frozen: {report.get('n_unmasked', 0)}  |  "
            f"Overlap coefficient: {report.get('overlap', 0.0):.4f}  |  cutoff {report.get('cutoff', 0.0):g}"
        )

    # -------------------------
    # Theory Tab
    # -------------------------
    def _build_theory_tab(self) -> QWidget:
        w = QWidget()
        layout = QVBoxLayout(w)

        box = QGroupBox("Quadratic model")
        form = QFormLayout(box)
        self._theory_inputs: Dict[str, Any] = {}
        for key, label in (("d_M", "Masked dimensions"), ("d_Mbar", "Frozen dimensions"),
                           ("n_samples", "Samples"), ("seed", "Seed")):
            spin = QSpinBox()
            spin.setRange(0 if key != "n_samples" else 1, 10_000_000)
            form.addRow(label, spin)
            self._theory_inputs[key] = spin
        for key, label, step in (("eps_flat", "Curvature along mask (eps)", 0.01),
                                 ("lambda_curv", "Curvature along complement (lambda)", 0.1),
                                 ("noise_sigma", "Gradient noise (sigma)", 0.1),
                                 ("eta", "Step size (eta)", 0.01)):
            spin = QDoubleSpinBox()
            spin.setDecimals(4)
            spin.setRange(0.0, 1000.0)
            spin.setSingleStep(step)
            form.addRow(label, spin)
            self._theory_inputs[key] = spin
        layout.addWidget(box)

        btn_row = QHBoxLayout()
        self.btn_theory = QPushButton("Run Check")
        self.btn_theory.clicked.connect(self._start_theory)
        btn_row.addWidget(self.btn_theory)
        self.theory_progress = QProgressBar()
        self.theory_progress.setValue(0)
        btn_row.addWidget(self.theory_progress)
        layout.addLayout(btn_row)

        self.theory_log = QTextEdit()
        self.theory_log.setReadOnly(True)
        layout.addWidget(self.theory_log)
        return w

    def theory_params(self) -> Dict[str, Any]:
        return {key: box.value() for key, box in self._theory_inputs.items()}

    def _start_theory(self):
        self.btn_theory.setEnabled(False)
        self.theory_progress.setValue(0)
        self.theory_worker = TheoryWorker(self.theory_params())
        self.theory_worker.log.connect(self.theory_log.append)
        self.theory_worker.progress.connect(self.theory_progress.setValue)
        self.theory_worker.done.connect(self._on_theory_done)
        self.theory_worker.failed.connect(lambda msg: QMessageBox.warning(self, "Invalid model", msg))
        self.theory_worker.finished.connect(lambda: self.btn_theory.setEnabled(True))
        self.theory_log.append("=== Running Monte Carlo check ===")
        self.theory_worker.start()

    def _on_theory_done(self, result: Dict[str, Any]):
        p, c = result["prop1"], result["contrast"]
        verdict = "PASS" if p["pass"] else "FAIL"
        self.theory_log.append(
            f"Mean increase {p['empirical_mean_increase']:.6g} (se {p['standard_error']:.2g}); "
            f"bound {p['predicted_lower_bound']:.6g}; analytic {p['analytic_expectation']:.6g} -> {verdict}"
        )
        self.theory_log.append(
            f"Unauthorized step {c['unauthorized_mean']:.6g}  |  authorized step {c['authorized_mean']:.6g}  |  "
            f"difference {c['difference_mean']:.6g} (predicted {c['predicted_difference']:.6g})"
        )


def launch_viewer(start_dir: Optional[str] = None) -> int:
    app = QApplication.instance() or QApplication(sys.argv)
    app.setFont(QFont(get_default_font(), 12))
    app.setStyleSheet(STYLE)
    win = MainWindow(start_dir)
    win.show()
    return app.exec()
