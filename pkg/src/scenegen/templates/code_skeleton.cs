string rootDir = TxApplication.SystemRootDirectory;
string weldingLibPath = Path.Combine(rootDir, "Welding");
string[] weldingModels = Directory.GetDirectories(weldingLibPath, "*.cojt", SearchOption.TopDirectoryOnly);

/* create model list */

foreach (string model in weldingModels)
{
    DirectoryInfo directoryInfo = new DirectoryInfo(model);

    /* load models */
}

Random rand = new Random();
TxPhysicalRoot txPhysicalRoot = TxApplication.ActiveDocument.PhysicalRoot;

/* add objects into the scene */

TxApplication.RefreshDisplay();
